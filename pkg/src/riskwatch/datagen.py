"""Synthetic market data with planted, labelled risk events.

The generator stands in for a multi-asset daily market history: stocks,
forex pairs, commodity futures, monthly macro indicators and a daily news
sentiment series. Prices follow a regime-switching geometric Brownian
motion; risk events are injected at known dates and recorded in each
record's label mask so that detectors can be scored by construction.

Records are stored column-wise per kind (``KindBlock``) so that desk-scale
and multi-million-row sets stay cheap; ``Record`` is the row view.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .taxonomy import N_RISK_TYPES, RISK_TYPES, RiskType, parse_risk_type

TRADING_DAYS_PER_YEAR = 261


class Kind(str, Enum):
    STOCK = "stock"
    FOREX = "forex"
    COMMODITY = "commodity"
    MACRO = "macro"
    SENTIMENT = "sentiment"


KINDS: tuple[Kind, ...] = tuple(Kind)
DAILY_KINDS = (Kind.STOCK, Kind.FOREX, Kind.COMMODITY, Kind.SENTIMENT)
PRICE_KINDS = (Kind.STOCK, Kind.FOREX, Kind.COMMODITY)

KIND_FIELDS: dict[Kind, tuple[str, ...]] = {
    Kind.STOCK: ("open", "high", "low", "close", "volume", "vwap", "bid", "ask",
                 "spread", "turnover"),
    Kind.FOREX: ("open", "high", "low", "close", "spread", "volume"),
    Kind.COMMODITY: ("open", "high", "low", "close", "volume"),
    Kind.MACRO: ("gdp_growth", "inflation", "unemployment", "policy_rate",
                 "yield_10y", "yield_2y", "pmi", "consumer_confidence"),
    Kind.SENTIMENT: ("sentiment_score", "article_count", "sentiment_dispersion"),
}

TABLE2_LABELS = {
    Kind.STOCK: "Stock data",
    Kind.FOREX: "Forex data",
    Kind.COMMODITY: "Commodity futures",
    Kind.MACRO: "Macroeconomic indicators",
    Kind.SENTIMENT: "News sentiment",
}

MACRO_INSTRUMENT = "MACRO"
SENTIMENT_INSTRUMENT = "NEWS"


class SpecError(ValueError):
    """Invalid generator spec; ``problems`` lists every offending field."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid generator spec: " + "; ".join(self.problems))


class RecordParseError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class PlantedEvent:
    """An explicitly placed risk event; ``start`` snaps to the next trading day."""
    risk_type: RiskType
    start: date
    duration_days: int
    magnitude: float | None = None


def _default_rates() -> dict[RiskType, float]:
    return {RiskType.MARKET_CRASH: 2.0, RiskType.LIQUIDITY: 2.0,
            RiskType.OPERATIONAL: 2.0, RiskType.VOLATILITY: 1.5}


def _default_magnitudes() -> dict[RiskType, float]:
    # crash: cumulative simple return; liquidity: volume drop fraction;
    # operational: per-cell corruption probability; volatility: vol multiplier
    return {RiskType.MARKET_CRASH: -0.20, RiskType.LIQUIDITY: 0.8,
            RiskType.OPERATIONAL: 0.3, RiskType.VOLATILITY: 3.0}


def _default_durations() -> dict[RiskType, int]:
    return {RiskType.MARKET_CRASH: 5, RiskType.LIQUIDITY: 10,
            RiskType.OPERATIONAL: 3, RiskType.VOLATILITY: 20}


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 20240101
    n_instruments: int = 10
    n_forex: int = 3
    n_commodities: int = 2
    start_date: date = date(2020, 1, 1)
    end_date: date = date(2023, 12, 31)
    base_volatility: float = 0.012
    drift: float = 0.0
    stressed_multiplier: float = 2.0
    regime_transition: tuple[tuple[float, float], tuple[float, float]] = ((0.995, 0.005), (0.08, 0.92))
    event_rates: Mapping[RiskType, float] = field(default_factory=_default_rates)
    event_magnitude: Mapping[RiskType, float] = field(default_factory=_default_magnitudes)
    event_duration: Mapping[RiskType, int] = field(default_factory=_default_durations)
    precursor_days: int = 30
    planted_events: tuple[PlantedEvent, ...] = ()
    kinds: tuple[Kind, ...] = KINDS

    def validate(self) -> None:
        problems = []
        if not 0 <= self.seed < 2 ** 64:
            problems.append("seed: must be a 64-bit unsigned integer")
        if self.n_instruments < 1:
            problems.append("n_instruments: must be >= 1")
        if self.n_forex < 0 or self.n_commodities < 0:
            problems.append("n_forex/n_commodities: must be >= 0")
        if not self.start_date < self.end_date:
            problems.append("start_date: must be before end_date")
        if not (math.isfinite(self.base_volatility) and self.base_volatility >= 0):
            problems.append("base_volatility: must be finite and >= 0")
        if self.stressed_multiplier < 0:
            problems.append("stressed_multiplier: must be >= 0")
        P = np.asarray(self.regime_transition, dtype=float)
        if P.shape != (2, 2):
            problems.append("regime_transition: must be a 2x2 matrix")
        elif (P < 0).any() or np.abs(P.sum(axis=1) - 1.0).max() > 1e-12:
            problems.append("regime_transition: rows must be non-negative and sum to 1")
        for rt, rate in self.event_rates.items():
            if not (math.isfinite(rate) and rate >= 0):
                problems.append(f"event_rates[{RiskType(rt).value}]: must be >= 0")
        for rt, d in self.event_duration.items():
            if d < 1:
                problems.append(f"event_duration[{RiskType(rt).value}]: must be >= 1")
        if self.precursor_days < 0:
            problems.append("precursor_days: must be >= 0")
        for ev in self.planted_events:
            if ev.duration_days < 1:
                problems.append(f"planted_events: duration of {ev.risk_type.value} event must be >= 1")
        unknown = [k for k in self.kinds if k not in KINDS]
        if unknown or not self.kinds:
            problems.append("kinds: must be a non-empty subset of " + ",".join(k.value for k in KINDS))
        if problems:
            raise SpecError(problems)

    def magnitude(self, rt: RiskType) -> float:
        return float(self.event_magnitude.get(rt, _default_magnitudes()[rt]))

    def duration(self, rt: RiskType) -> int:
        return int(self.event_duration.get(rt, _default_durations()[rt]))


@dataclass(frozen=True)
class Event:
    """A scheduled risk event, in trading-day indices (end exclusive)."""
    risk_type: RiskType
    start: int
    end: int
    magnitude: float


@dataclass(frozen=True)
class Record:
    timestamp: date
    instrument: str
    kind: Kind
    fields: dict[str, float | None]
    label_mask: frozenset[RiskType]

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp.isoformat(),
            "instrument": self.instrument,
            "kind": self.kind.value,
            "fields": dict(self.fields),
            "labels": [r.value for r in RISK_TYPES if r in self.label_mask],
        }

    @classmethod
    def from_json(cls, obj) -> "Record":
        """Validate and build a record from its JSON object form."""
        if not isinstance(obj, dict):
            raise ValueError("record must be a JSON object")
        try:
            kind = Kind(obj["kind"])
            ts = date.fromisoformat(obj["timestamp"])
            instrument = obj["instrument"]
        except KeyError as exc:
            raise ValueError(f"missing key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ValueError(str(exc)) from None
        if not isinstance(instrument, str) or not instrument:
            raise ValueError("instrument must be a non-empty string")
        raw_fields = obj.get("fields", {})
        if not isinstance(raw_fields, dict):
            raise ValueError("fields must be an object")
        fields: dict[str, float | None] = {}
        for name in KIND_FIELDS[kind]:
            v = raw_fields.get(name)
            if v is None:
                fields[name] = None
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValueError(f"field {name!r} must be a finite number or null")
            fields[name] = float(v)
        extra = set(raw_fields) - set(KIND_FIELDS[kind])
        if extra:
            raise ValueError(f"unknown fields for {kind.value}: {sorted(extra)}")
        labels = frozenset(parse_risk_type(x) for x in obj.get("labels", []))
        return cls(ts, instrument, kind, fields, labels)


@dataclass(eq=False)
class KindBlock:
    """All records of one kind, row-aligned arrays sorted by (timestamp, instrument)."""
    kind: Kind
    timestamps: np.ndarray          # datetime64[D]
    instrument_names: tuple[str, ...]
    instrument_codes: np.ndarray    # int32 index into instrument_names
    values: np.ndarray              # (n, n_fields) float64, NaN = missing
    labels: np.ndarray              # (n, N_RISK_TYPES) bool

    @property
    def field_names(self) -> tuple[str, ...]:
        return KIND_FIELDS[self.kind]

    def __len__(self) -> int:
        return int(self.timestamps.shape[0])

    def instruments(self) -> np.ndarray:
        return np.asarray(self.instrument_names, dtype=object)[self.instrument_codes]

    def __eq__(self, other) -> bool:
        if not isinstance(other, KindBlock):
            return NotImplemented
        return (self.kind == other.kind
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.instruments(), other.instruments())
                and np.array_equal(self.values, other.values, equal_nan=True)
                and np.array_equal(self.labels, other.labels))

    def rows(self) -> Iterator[Record]:
        names = self.field_names
        ts = self.timestamps.astype(object)
        for j in range(len(self)):
            vals = self.values[j]
            fields = {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, vals)}
            mask = frozenset(r for r, on in zip(RISK_TYPES, self.labels[j]) if on)
            yield Record(ts[j], self.instrument_names[self.instrument_codes[j]],
                         self.kind, fields, mask)


@dataclass(eq=False)
class RecordSet:
    blocks: dict[Kind, KindBlock]
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        self.blocks = {k: self.blocks[k] for k in KINDS if k in self.blocks and len(self.blocks[k])}

    def __len__(self) -> int:
        return sum(len(b) for b in self.blocks.values())

    def __iter__(self) -> Iterator[Record]:
        for block in self.blocks.values():
            yield from block.rows()

    def __eq__(self, other) -> bool:
        if not isinstance(other, RecordSet):
            return NotImplemented
        return self.blocks.keys() == other.blocks.keys() and all(
            self.blocks[k] == other.blocks[k] for k in self.blocks)

    def block(self, kind: Kind) -> KindBlock | None:
        return self.blocks.get(kind)

    @classmethod
    def from_records(cls, records: Iterable[Record]) -> "RecordSet":
        by_kind: dict[Kind, list[Record]] = {}
        for r in records:
            by_kind.setdefault(r.kind, []).append(r)
        blocks = {}
        for kind, rows in by_kind.items():
            rows.sort(key=lambda r: (r.timestamp, r.instrument))
            names: dict[str, int] = {}
            codes = np.array([names.setdefault(r.instrument, len(names)) for r in rows], dtype=np.int32)
            fnames = KIND_FIELDS[kind]
            values = np.array([[np.nan if r.fields.get(f) is None else r.fields[f] for f in fnames]
                               for r in rows], dtype=np.float64).reshape(len(rows), len(fnames))
            labels = np.array([[rt in r.label_mask for rt in RISK_TYPES] for r in rows],
                              dtype=bool).reshape(len(rows), N_RISK_TYPES)
            ts = np.array([np.datetime64(r.timestamp, "D") for r in rows], dtype="datetime64[D]")
            blocks[kind] = KindBlock(kind, ts, tuple(names), codes, values, labels)
        return cls(blocks)

    def slice_dates(self, start, end) -> "RecordSet":
        """Records with start <= timestamp <= end (inclusive, dates)."""
        lo, hi = np.datetime64(start, "D"), np.datetime64(end, "D")
        out = {}
        for kind, b in self.blocks.items():
            keep = (b.timestamps >= lo) & (b.timestamps <= hi)
            out[kind] = KindBlock(kind, b.timestamps[keep], b.instrument_names,
                                  b.instrument_codes[keep], b.values[keep], b.labels[keep])
        return RecordSet(out)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def trading_days(start: date, end: date) -> np.ndarray:
    """Every weekday in [start, end]; no holiday calendar."""
    days = np.arange(np.datetime64(start, "D"), np.datetime64(end, "D") + 1)
    return days[np.is_busday(days)]


def whole_months(start: date, end: date) -> list[date]:
    """First day of every calendar month lying entirely inside [start, end]."""
    out = []
    y, m = start.year, start.month
    if start.day != 1:
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    while True:
        first = date(y, m, 1)
        ny, nm = (y + 1, 1) if m == 12 else (y, m + 1)
        last = date.fromordinal(date(ny, nm, 1).toordinal() - 1)
        if last > end:
            return out
        out.append(first)
        y, m = ny, nm


def _schedule_events(spec: GeneratorSpec, days: np.ndarray, rng) -> list[Event]:
    T = len(days)
    years = T / TRADING_DAYS_PER_YEAR
    events = []
    for rt in RISK_TYPES:
        rate = float(spec.event_rates.get(rt, 0.0))
        n = int(rng.poisson(rate * years)) if rate > 0 else 0
        starts = np.sort(rng.integers(0, T, size=n))
        dur = spec.duration(rt)
        for s in starts:
            events.append(Event(rt, int(s), min(T, int(s) + dur), spec.magnitude(rt)))
    for ev in spec.planted_events:
        s = int(np.searchsorted(days, np.datetime64(ev.start, "D")))
        if s >= T:
            continue
        mag = spec.magnitude(ev.risk_type) if ev.magnitude is None else float(ev.magnitude)
        events.append(Event(ev.risk_type, s, min(T, s + ev.duration_days), mag))
    events.sort(key=lambda e: (e.start, RISK_TYPES.index(e.risk_type)))
    return events


def _regime_path(P, T, rng) -> np.ndarray:
    u = rng.random(T)
    stressed = np.zeros(T, dtype=bool)
    state = 0
    for t in range(T):
        stressed[t] = state == 1
        state = 1 - state if u[t] < P[state][1 - state] else state
    return stressed


def _ohlc(close, prev_close, vol, rng):
    """Open/high/low around the close path; exact copies of close when vol == 0."""
    shape = close.shape
    gap = np.exp(0.2 * vol[:, None] * rng.standard_normal(shape))
    open_ = prev_close * gap
    wick_hi = np.exp(0.5 * vol[:, None] * np.abs(rng.standard_normal(shape)))
    wick_lo = np.exp(-0.5 * vol[:, None] * np.abs(rng.standard_normal(shape)))
    high = np.maximum(open_, close) * wick_hi
    low = np.minimum(open_, close) * wick_lo
    return open_, high, low


def generate(spec: GeneratorSpec) -> RecordSet:
    """Deterministically generate a RecordSet for ``spec``."""
    spec.validate()
    days = trading_days(spec.start_date, spec.end_date)
    T = len(days)
    if T < 2:
        raise SpecError(["start_date/end_date: range holds fewer than 2 trading days"])

    streams = np.random.SeedSequence(spec.seed).spawn(8)
    rng_events, rng_regime, rng_market, rng_stock, rng_fx, rng_cmd, rng_macro, rng_sent = (
        np.random.default_rng(s) for s in streams)

    events = _schedule_events(spec, days, rng_events)
    active = np.zeros((T, N_RISK_TYPES), dtype=bool)
    lead = np.zeros((T, N_RISK_TYPES))       # 1 over [start - precursor, end)
    ramp = np.zeros((T, N_RISK_TYPES))       # rises 0 -> 1 over the precursor, 1 during
    crash_step = np.zeros(T)                 # per-day log-return injected by crashes
    pre = spec.precursor_days
    for ev in events:
        j = RISK_TYPES.index(ev.risk_type)
        active[ev.start:ev.end, j] = True
        a = max(0, ev.start - pre)
        lead[a:ev.end, j] = 1.0
        if pre > 0:
            k = np.arange(a, ev.start)
            ramp[a:ev.start, j] = np.maximum(ramp[a:ev.start, j], (k - (ev.start - pre) + 1) / pre)
        ramp[ev.start:ev.end, j] = 1.0
        if ev.risk_type is RiskType.MARKET_CRASH:
            crash_step[ev.start:ev.end] += math.log1p(ev.magnitude) / (ev.end - ev.start)

    i_crash, i_liq, i_op, i_vol = (RISK_TYPES.index(r) for r in RISK_TYPES)
    stressed = _regime_path(spec.regime_transition, T, rng_regime)
    vol_mult = np.ones(T)
    for ev in events:
        if ev.risk_type is RiskType.VOLATILITY:
            vol_mult[ev.start:ev.end] = np.maximum(vol_mult[ev.start:ev.end], ev.magnitude)
    vol = (spec.base_volatility
           * np.where(stressed, spec.stressed_multiplier, 1.0)
           * vol_mult
           * (1.0 + 0.3 * lead[:, i_crash]))
    market_z = rng_market.standard_normal(T)
    liq_drop = np.zeros(T)
    for ev in events:
        if ev.risk_type is RiskType.LIQUIDITY:
            liq_drop[ev.start:ev.end] = np.maximum(liq_drop[ev.start:ev.end], ev.magnitude)
    spread_mult = (1.0 + 1.0 * ramp[:, i_liq]) * (1.0 + 4.0 * liq_drop)
    volume_mult = 1.0 - liq_drop

    blocks: dict[Kind, KindBlock] = {}
    labels_daily = active

    def price_block(kind, n, names, rng, beta, crash_weight, vol_scale, level, spread_rel, vol_level):
        sig = vol * vol_scale
        z = beta * market_z[:, None] + math.sqrt(1 - beta ** 2) * rng.standard_normal((T, n))
        r = spec.drift - 0.5 * sig[:, None] ** 2 + sig[:, None] * z + crash_weight * crash_step[:, None]
        p0 = level * np.exp(rng.uniform(-0.5, 0.5, size=n))
        close = p0 * np.exp(np.cumsum(r, axis=0))
        prev_close = np.vstack([p0[None, :], close[:-1]])
        open_, high, low = _ohlc(close, prev_close, sig, rng)
        base_volume = vol_level * np.exp(rng.uniform(-0.5, 0.5, size=n))
        volume = base_volume * np.exp(0.25 * rng.standard_normal((T, n))) * volume_mult[:, None]
        rel = spread_rel * np.exp(0.1 * rng.standard_normal((T, n))) * spread_mult[:, None]
        spread = close * rel
        cols = {"open": open_, "high": high, "low": low, "close": close,
                "volume": volume, "spread": spread,
                "vwap": (high + low + close) / 3.0,
                "bid": close - spread / 2, "ask": close + spread / 2,
                "turnover": close * volume}
        values = np.stack([cols[f] for f in KIND_FIELDS[kind]], axis=-1)  # (T, n, F)
        if kind is Kind.STOCK:
            _corrupt_operational(values, events, rng)
        return _daily_block(kind, days, names, values, labels_daily)

    if Kind.STOCK in spec.kinds:
        names = tuple(f"STK{i:03d}" if spec.n_instruments <= 1000 else f"STK{i:06d}"
                      for i in range(spec.n_instruments))
        blocks[Kind.STOCK] = price_block(Kind.STOCK, spec.n_instruments, names, rng_stock,
                                         0.6, 1.0, 1.0, 100.0, 5e-4, 1e6)
    if Kind.FOREX in spec.kinds and spec.n_forex:
        names = tuple(f"FX{i:02d}" for i in range(spec.n_forex))
        blocks[Kind.FOREX] = price_block(Kind.FOREX, spec.n_forex, names, rng_fx,
                                         0.3, 0.1, 0.5, 1.2, 1e-4, 5e4)
    if Kind.COMMODITY in spec.kinds and spec.n_commodities:
        names = tuple(f"CMD{i:02d}" for i in range(spec.n_commodities))
        blocks[Kind.COMMODITY] = price_block(Kind.COMMODITY, spec.n_commodities, names, rng_cmd,
                                             0.3, 0.5, 1.2, 60.0, 3e-4, 2e5)
    if Kind.SENTIMENT in spec.kinds:
        noise = rng_sent.standard_normal(T)
        score = np.zeros(T)
        for t in range(T):
            score[t] = (0.6 * score[t - 1] if t else 0.0) + 0.4 * noise[t]
        score = score - 1.5 * lead[:, i_crash]
        articles = rng_sent.poisson(50.0 * (1.0 + lead[:, i_crash])).astype(float)
        dispersion = np.abs(0.3 + 0.05 * rng_sent.standard_normal(T) + 0.2 * lead[:, i_vol])
        values = np.stack([score, articles, dispersion], axis=-1)[:, None, :]
        blocks[Kind.SENTIMENT] = _daily_block(Kind.SENTIMENT, days, (SENTIMENT_INSTRUMENT,),
                                              values, labels_daily)
    if Kind.MACRO in spec.kinds:
        months = whole_months(spec.start_date, spec.end_date)
        if months:
            blocks[Kind.MACRO] = _macro_block(months, days, events, rng_macro)

    return RecordSet(blocks, tuple(events))


def _corrupt_operational(values, events, rng):
    """Missing cells and x10 spikes on stock fields during operational events."""
    for ev in events:
        if ev.risk_type is not RiskType.OPERATIONAL:
            continue
        seg = values[ev.start:ev.end]
        u = rng.random(seg.shape)
        seg[u < ev.magnitude / 5.0] *= 10.0
        seg[(u >= ev.magnitude / 5.0) & (u < ev.magnitude)] = np.nan


def _daily_block(kind, days, names, values, labels_daily) -> KindBlock:
    T, n, F = values.shape
    return KindBlock(
        kind=kind,
        timestamps=np.repeat(days, n),
        instrument_names=tuple(names),
        instrument_codes=np.tile(np.arange(n, dtype=np.int32), T),
        values=values.reshape(T * n, F),
        labels=np.repeat(labels_daily, n, axis=0),
    )


_MACRO_LEVELS = np.array([2.0, 2.5, 5.0, 1.5, 3.0, 2.2, 52.0, 95.0])
_MACRO_SCALES = np.array([0.5, 0.3, 0.3, 0.25, 0.2, 0.2, 2.0, 3.0])


def _macro_block(months, days, events, rng) -> KindBlock:
    M = len(months)
    x = np.zeros((M, len(_MACRO_LEVELS)))
    eps = rng.standard_normal(x.shape)
    for t in range(M):
        x[t] = (0.8 * x[t - 1] if t else 0.0) + eps[t]
    values = _MACRO_LEVELS + _MACRO_SCALES * x
    stamps = np.array([np.datetime64(m, "D") for m in months])
    labels = np.zeros((M, N_RISK_TYPES), dtype=bool)
    for ev in events:
        lo, hi = days[ev.start], days[ev.end - 1]
        labels[(stamps >= lo) & (stamps <= hi), RISK_TYPES.index(ev.risk_type)] = True
    return KindBlock(Kind.MACRO, stamps, (MACRO_INSTRUMENT,), np.zeros(M, dtype=np.int32),
                     values, labels)


# ---------------------------------------------------------------------------
# per-kind summary table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    data_type: str
    sample_count: int
    feature_count: int
    granularity: str


@dataclass(frozen=True)
class SummaryTable:
    rows: tuple[SummaryRow, ...]

    def row(self, data_type: str) -> SummaryRow | None:
        return next((r for r in self.rows if r.data_type == data_type), None)

    def format(self) -> str:
        header = ("Data Type", "Sample Count", "Feature Count", "Time Granularity")
        body = [(r.data_type, f"{r.sample_count:,}", str(r.feature_count), r.granularity)
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)) for line in [header, *body]]
        return "\n".join(lines)


def summarize(records: RecordSet) -> SummaryTable:
    if len(records) == 0:
        raise ValueError("cannot summarize an empty record set")
    rows = []
    for kind, block in records.blocks.items():
        rows.append(SummaryRow(TABLE2_LABELS[kind], len(block), len(KIND_FIELDS[kind]),
                               "Monthly" if kind is Kind.MACRO else "Daily"))
    return SummaryTable(tuple(rows))


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if v != v else repr(float(v))


def _csv_rows(block: KindBlock, columns: Sequence[str]) -> Iterator[list[str]]:
    positions = [block.field_names.index(c) if c in block.field_names else -1 for c in columns]
    stamps = np.datetime_as_string(block.timestamps, unit="D")
    names = block.instrument_names
    codes = block.instrument_codes.tolist()
    vals = block.values.tolist()
    label_names = [r.value for r in RISK_TYPES]
    labels = ["|".join(n for n, on in zip(label_names, row) if on) for row in block.labels.tolist()]
    kind = block.kind.value
    for j in range(len(block)):
        row = vals[j]
        yield [stamps[j], names[codes[j]], kind,
               *[_fmt(row[p]) if p >= 0 else "" for p in positions], labels[j]]


def combined_columns(kinds: Iterable[Kind]) -> list[str]:
    cols: list[str] = []
    for kind in kinds:
        for f in KIND_FIELDS[kind]:
            if f not in cols:
                cols.append(f)
    return cols


def write_records(records: RecordSet, path, split_kinds: bool = False) -> list[Path]:
    """Write CSV; one combined file, or ``<kind>.csv`` files in directory ``path``."""
    path = Path(path)
    written = []
    if split_kinds:
        path.mkdir(parents=True, exist_ok=True)
        for kind, block in records.blocks.items():
            target = path / f"{kind.value}.csv"
            _write_csv(target, list(KIND_FIELDS[kind]), [block])
            written.append(target)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        _write_csv(path, combined_columns(records.blocks), list(records.blocks.values()))
        written.append(path)
    return written


def _write_csv(path: Path, columns, blocks) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "instrument", "kind", *columns, "labels"])
        for block in blocks:
            w.writerows(_csv_rows(block, columns))


def records_to_csv_bytes(records: RecordSet) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    columns = combined_columns(records.blocks)
    w.writerow(["timestamp", "instrument", "kind", *columns, "labels"])
    for block in records.blocks.values():
        w.writerows(_csv_rows(block, columns))
    return buf.getvalue().encode("utf-8")


def read_records(path) -> RecordSet:
    """Read a combined CSV file or a directory of per-kind CSV files."""
    path = Path(path)
    if path.is_dir():
        files = [path / f"{k.value}.csv" for k in KINDS if (path / f"{k.value}.csv").exists()]
        if not files:
            raise FileNotFoundError(f"no <kind>.csv files in {path}")
    else:
        files = [path]
    parts: dict[Kind, list] = {}
    for f in files:
        with open(f, newline="", encoding="utf-8") as fh:
            _parse_csv(fh, parts)
    return _assemble(parts)


def _parse_csv(fh, parts: dict) -> None:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise RecordParseError(1, "empty file") from None
    if header[:3] != ["timestamp", "instrument", "kind"] or header[-1] != "labels":
        raise RecordParseError(1, "header must be timestamp,instrument,kind,<fields...>,labels")
    col = {name: i for i, name in enumerate(header)}
    layouts = {}
    for kind in KINDS:
        layouts[kind] = [col.get(f, -1) for f in KIND_FIELDS[kind]]
    width = len(header)
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != width:
            raise RecordParseError(lineno, f"expected {width} cells, found {len(row)}")
        try:
            kind = Kind(row[2])
        except ValueError:
            raise RecordParseError(lineno, f"unknown kind {row[2]!r}") from None
        try:
            ts = np.datetime64(date.fromisoformat(row[0]), "D")
        except ValueError:
            raise RecordParseError(lineno, f"bad timestamp {row[0]!r}") from None
        if not row[1]:
            raise RecordParseError(lineno, "empty instrument")
        vals = []
        for fname, p in zip(KIND_FIELDS[kind], layouts[kind]):
            if p < 0:
                raise RecordParseError(lineno, f"column {fname!r} missing from header")
            cell = row[p]
            if cell == "":
                vals.append(np.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise RecordParseError(lineno, f"field {fname!r}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise RecordParseError(lineno, f"field {fname!r}: non-finite value {cell!r}")
            vals.append(v)
        try:
            mask = [False] * N_RISK_TYPES
            for name in filter(None, row[-1].split("|")):
                mask[RISK_TYPES.index(parse_risk_type(name))] = True
        except ValueError as exc:
            raise RecordParseError(lineno, str(exc)) from None
        parts.setdefault(kind, []).append((ts, row[1], vals, mask))


def _assemble(parts: dict) -> RecordSet:
    blocks = {}
    for kind, rows in parts.items():
        rows.sort(key=lambda r: (r[0], r[1]))
        names: dict[str, int] = {}
        codes = np.array([names.setdefault(r[1], len(names)) for r in rows], dtype=np.int32)
        blocks[kind] = KindBlock(
            kind,
            np.array([r[0] for r in rows], dtype="datetime64[D]"),
            tuple(names),
            codes,
            np.array([r[2] for r in rows], dtype=np.float64).reshape(len(rows), len(KIND_FIELDS[kind])),
            np.array([r[3] for r in rows], dtype=bool).reshape(len(rows), N_RISK_TYPES),
        )
    return RecordSet(blocks)


def spec_with(spec: GeneratorSpec, **changes) -> GeneratorSpec:
    return replace(spec, **changes)
