"""Cleaning, normalisation, feature extraction and windowing.

Raw records are pivoted onto a daily grid (one column per
``kind:instrument:field``), cleaned, filled, turned into the fixed feature
catalog below and cut into supervised lookback windows.

Feature catalog (per price instrument ``I`` of kind stock/forex/commodity):

    I.log_return      ln(close_t / close_{t-1}), 0 on the first row
    I.volatility_20   population std of the last 20 log returns
    I.momentum_5      ln(close_t / close_{t-5})
    I.momentum_20     ln(close_t / close_{t-20})
    I.volume_z        z-score of volume within its trailing 20 rows
    I.spread_rel      spread / close (instruments with a spread field)

plus ``market.*`` cross-sectional stock means of the above and
``market.dispersion`` (cross-sectional std of stock returns),
``NEWS.sentiment_score|article_count|sentiment_dispersion`` and every
``MACRO.<field>`` forward-filled onto the daily grid. Rolling windows are
expanding until 20 rows are available.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datagen import DAILY_KINDS, KIND_FIELDS, PRICE_KINDS, Kind, RecordSet
from .taxonomy import N_RISK_TYPES, RISK_TYPES

logger = logging.getLogger(__name__)

ROLLING_WINDOW = 20
MAD_CONSISTENCY = 1.4826
MEANAD_CONSISTENCY = 1.2533  # sqrt(pi/2)


class InsufficientDataError(ValueError):
    pass


class MissingDataError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    timestamps: np.ndarray
    feature_names: tuple[str, ...]
    values: np.ndarray
    missing_mask: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[D]")
        self.values = np.asarray(self.values, dtype=np.float64)
        self.feature_names = tuple(self.feature_names)
        if self.values.ndim != 2 or self.values.shape != (len(self.timestamps), len(self.feature_names)):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"{len(self.timestamps)} rows x {len(self.feature_names)} features")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > np.timedelta64(0, "D")).all():
            raise ValueError("timestamps must be strictly increasing")
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.values)
        else:
            self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
            if np.isnan(self.values[~self.missing_mask]).any():
                raise ValueError("NaN found in a cell not marked missing")
            self.values = np.where(self.missing_mask, np.nan, self.values)

    def __len__(self) -> int:
        return len(self.timestamps)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.feature_names.index(name)]

    def with_values(self, values, missing_mask=None) -> "FeatureMatrix":
        return FeatureMatrix(self.timestamps, self.feature_names, values, missing_mask)

    def rows(self, sl) -> "FeatureMatrix":
        return FeatureMatrix(self.timestamps[sl], self.feature_names, self.values[sl])

    def equals(self, other: "FeatureMatrix") -> bool:
        return (self.feature_names == other.feature_names
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.values, other.values, equal_nan=True))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", *self.feature_names])
            stamps = np.datetime_as_string(self.timestamps, unit="D")
            for ts, row in zip(stamps, self.values.tolist()):
                w.writerow([ts, *("" if v != v else repr(v) for v in row)])

    @classmethod
    def read_csv(cls, path) -> "FeatureMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            stamps, rows = [], []
            for row in reader:
                stamps.append(row[0])
                rows.append([float(c) if c else np.nan for c in row[1:]])
        values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
        return cls(np.array(stamps, dtype="datetime64[D]"), tuple(header[1:]), values)


# ---------------------------------------------------------------------------
# pivot
# ---------------------------------------------------------------------------

def raw_column(kind: Kind, instrument: str, field_name: str) -> str:
    return f"{kind.value}:{instrument}:{field_name}"


def split_raw_column(name: str) -> tuple[Kind, str, str]:
    kind, inst, fname = name.split(":")
    return Kind(kind), inst, fname


def raw_columns_for(records: RecordSet) -> tuple[str, ...]:
    cols = []
    for kind, block in records.blocks.items():
        for inst in sorted(block.instrument_names):
            cols.extend(raw_column(kind, inst, f) for f in KIND_FIELDS[kind])
    return tuple(cols)


def pivot_records(records: RecordSet, columns: Sequence[str] | None = None):
    """Daily-grid raw matrix and per-day label matrix.

    The grid is the union of daily-kind timestamps. Monthly macro values land
    on the first grid day on or after their date, leaving the other days
    missing for ``fill_missing`` to forward-fill. Labels are the union of the
    daily records' label masks.
    """
    daily = [b for k, b in records.blocks.items() if k in DAILY_KINDS]
    if not daily:
        raise InsufficientDataError("no daily records to build a grid from")
    grid = np.unique(np.concatenate([b.timestamps for b in daily]))
    columns = tuple(columns) if columns is not None else raw_columns_for(records)
    col_index = {c: i for i, c in enumerate(columns)}
    values = np.full((len(grid), len(columns)), np.nan)
    labels = np.zeros((len(grid), N_RISK_TYPES), dtype=bool)
    for kind, block in records.blocks.items():
        rows = np.searchsorted(grid, block.timestamps, side="left")
        keep = rows < len(grid)
        if kind in DAILY_KINDS:
            np.logical_or.at(labels, rows, block.labels)
        target = np.array([[col_index.get(raw_column(kind, inst, f), -1) for f in KIND_FIELDS[kind]]
                           for inst in block.instrument_names], dtype=np.int64)
        cidx = target[block.instrument_codes[keep]]
        ridx = np.broadcast_to(rows[keep][:, None], cidx.shape)
        ok = cidx >= 0
        values[ridx[ok], cidx[ok]] = block.values[keep][ok]
    return FeatureMatrix(grid, columns, values), labels


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobustScale:
    """Per-column robust centre and scale used for outlier flagging."""
    center: np.ndarray
    scale: np.ndarray  # 0 => column exempt from flagging


def fit_robust_scale(m: FeatureMatrix, rows=slice(None)) -> RobustScale:
    vals = m.values[rows]
    center = np.zeros(vals.shape[1])
    scale = np.zeros(vals.shape[1])
    for j in range(vals.shape[1]):
        obs = vals[:, j][~np.isnan(vals[:, j])]
        if obs.size == 0:
            continue
        med = np.median(obs)
        dev = np.abs(obs - med)
        mad = np.median(dev)
        center[j] = med
        if mad > 0:
            scale[j] = MAD_CONSISTENCY * mad
        else:
            # more than half the cells sit on the median; fall back to mean |dev|
            scale[j] = MEANAD_CONSISTENCY * dev.mean()
    return RobustScale(center, scale)


def clean_outliers(m: FeatureMatrix, z_threshold: float, scale: RobustScale | None = None) -> FeatureMatrix:
    """Mark cells whose robust z-score exceeds ``z_threshold`` as missing."""
    if not z_threshold > 0:
        raise ValueError(f"z_threshold must be positive, got {z_threshold}")
    if scale is None:
        scale = fit_robust_scale(m)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.abs(m.values - scale.center) / scale.scale
    flagged = (scale.scale > 0) & (z > z_threshold) & ~m.missing_mask
    if flagged.any():
        logger.debug("flagged %d outlier cells", int(flagged.sum()))
    mask = m.missing_mask | flagged
    return m.with_values(np.where(mask, np.nan, m.values), mask)


def _ffill_index(mask: np.ndarray) -> np.ndarray:
    n = mask.shape[0]
    idx = np.where(mask, 0, np.arange(n)[:, None])
    np.maximum.accumulate(idx, axis=0, out=idx)
    return idx


def forward_fill(values: np.ndarray) -> np.ndarray:
    """Column-wise forward fill; leading gaps stay NaN."""
    mask = np.isnan(values)
    if not mask.any():
        return values.copy()
    idx = _ffill_index(mask)
    out = np.take_along_axis(values, idx, axis=0)
    # rows before the first observation pick row 0, which may itself be NaN
    return out


def fill_missing(m: FeatureMatrix) -> FeatureMatrix:
    """Forward-fill then back-fill every feature."""
    empty = m.missing_mask.all(axis=0) if len(m) else np.ones(len(m.feature_names), bool)
    if empty.any():
        names = [m.feature_names[j] for j in np.flatnonzero(empty)]
        raise MissingDataError(f"feature(s) entirely missing: {', '.join(names)}")
    out = forward_fill(m.values)
    out = forward_fill(out[::-1])[::-1]
    return FeatureMatrix(m.timestamps, m.feature_names, out)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationParams:
    feature_names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def to_json(self) -> dict:
        return {"feature_names": list(self.feature_names), "mean": self.mean.tolist(),
                "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_json(cls, obj) -> "NormalizationParams":
        return cls(tuple(obj["feature_names"]), np.array(obj["mean"], dtype=float),
                   np.array(obj["std"], dtype=float), np.array(obj["constant"], dtype=bool))


def _row_selection(n: int, train_rows) -> np.ndarray:
    if isinstance(train_rows, range):
        train_rows = np.arange(n)[slice(train_rows.start, train_rows.stop, train_rows.step)]
    return np.arange(n)[train_rows]


def fit_normalizer(m: FeatureMatrix, train_rows) -> NormalizationParams:
    rows = _row_selection(len(m), train_rows)
    if rows.size == 0:
        raise ValueError("empty training range")
    x = m.values[rows]
    if np.isnan(x).any():
        raise MissingDataError("training rows contain missing cells; run fill_missing first")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std == 0
    return NormalizationParams(m.feature_names, mean, std, constant)


def apply_normalizer(m: FeatureMatrix, p: NormalizationParams) -> FeatureMatrix:
    if m.feature_names != p.feature_names:
        raise ValueError("feature names do not match the fitted normalizer")
    safe = np.where(p.constant, 1.0, p.std)
    z = (m.values - p.mean) / safe
    z[:, p.constant] = 0.0
    return m.with_values(np.where(m.missing_mask, np.nan, z), m.missing_mask)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def _rolling(x: np.ndarray, w: int, reducer) -> np.ndarray:
    """Trailing-window reduction along axis 0, expanding for the first w-1 rows."""
    out = np.empty_like(x)
    n = x.shape[0]
    head = min(n, w - 1)
    for t in range(head):
        out[t] = reducer(x[: t + 1], axis=0)
    if n >= w:
        out[w - 1:] = reducer(sliding_window_view(x, w, axis=0), axis=-1)
    return out


def _lagged_log_ratio(c: np.ndarray, k: int) -> np.ndarray:
    out = np.empty_like(c)
    out[k:] = np.log(c[k:] / c[:-k])
    out[:k] = np.log(c[:k] / c[0])
    return out


def _zscore_window(v: np.ndarray, w: int) -> np.ndarray:
    mean = _rolling(v, w, np.mean)
    std = _rolling(v, w, np.std)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = (v - mean) / std
    return np.where(std > 0, z, 0.0)


def feature_names_for(raw_columns: Sequence[str]) -> tuple[str, ...]:
    return _catalog(raw_columns)[0]


def _catalog(raw_columns):
    inst_fields: dict[tuple[Kind, str], dict[str, int]] = {}
    for j, name in enumerate(raw_columns):
        kind, inst, fname = split_raw_column(name)
        inst_fields.setdefault((kind, inst), {})[fname] = j
    names: list[str] = []
    price = [(k, i, f) for (k, i), f in inst_fields.items() if k in PRICE_KINDS and "close" in f]
    for kind, inst, fields in price:
        names += [f"{inst}.log_return", f"{inst}.volatility_20", f"{inst}.momentum_5",
                  f"{inst}.momentum_20"]
        if "volume" in fields:
            names.append(f"{inst}.volume_z")
        if "spread" in fields:
            names.append(f"{inst}.spread_rel")
    stocks = [(i, f) for k, i, f in price if k is Kind.STOCK]
    if stocks:
        names += ["market.log_return", "market.volatility_20", "market.momentum_5",
                  "market.momentum_20", "market.volume_z", "market.spread_rel",
                  "market.dispersion"]
    others = [(k, i, f) for (k, i), f in inst_fields.items() if k not in PRICE_KINDS]
    for kind, inst, fields in others:
        names += [f"{inst}.{fname}" for fname in KIND_FIELDS[kind] if fname in fields]
    return tuple(names), price, stocks, others


def features_from_raw(raw: FeatureMatrix, window: int = ROLLING_WINDOW) -> FeatureMatrix:
    """Compute the feature catalog from a gap-free raw matrix."""
    if len(raw) < window:
        raise InsufficientDataError(f"need at least {window} rows for the rolling window, got {len(raw)}")
    if raw.missing_mask.any():
        raise MissingDataError("raw matrix has missing cells; fill before extracting features")
    names, price, stocks, others = _catalog(raw.feature_names)
    v = raw.values
    cols: list[np.ndarray] = []
    per_stock: dict[str, list[np.ndarray]] = {k: [] for k in
                                              ("log_return", "volatility_20", "momentum_5",
                                               "momentum_20", "volume_z", "spread_rel")}
    for kind, inst, fields in price:
        close = v[:, fields["close"]]
        lr = np.zeros_like(close)
        lr[1:] = np.log(close[1:] / close[:-1])
        feats = {"log_return": lr,
                 "volatility_20": _rolling(lr, window, np.std),
                 "momentum_5": _lagged_log_ratio(close, 5),
                 "momentum_20": _lagged_log_ratio(close, 20)}
        if "volume" in fields:
            feats["volume_z"] = _zscore_window(v[:, fields["volume"]], window)
        if "spread" in fields:
            feats["spread_rel"] = v[:, fields["spread"]] / close
        cols.extend(feats.values())
        if kind is Kind.STOCK:
            for key, col in feats.items():
                per_stock[key].append(col)
    if stocks:
        for key in ("log_return", "volatility_20", "momentum_5", "momentum_20",
                    "volume_z", "spread_rel"):
            group = per_stock[key]
            cols.append(np.mean(np.stack(group, axis=1), axis=1) if group else np.zeros(len(raw)))
        cols.append(np.std(np.stack(per_stock["log_return"], axis=1), axis=1))
    for kind, inst, fields in others:
        cols.extend(v[:, fields[f]] for f in KIND_FIELDS[kind] if f in fields)
    values = np.stack(cols, axis=1) if cols else np.zeros((len(raw), 0))
    return FeatureMatrix(raw.timestamps, names, values)


def extract_features(source, window: int = ROLLING_WINDOW) -> FeatureMatrix:
    """Feature catalog from a RecordSet or a raw pivoted matrix."""
    if isinstance(source, RecordSet):
        source, _ = pivot_records(source)
    if len(source) < window:
        raise InsufficientDataError(f"need at least {window} rows for the rolling window, got {len(source)}")
    if source.missing_mask.any():
        source = fill_missing(source)
    return features_from_raw(source, window)


# ---------------------------------------------------------------------------
# supervised samples
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    inputs: np.ndarray              # (N, lookback, n_features)
    labels: np.ndarray              # (N, N_RISK_TYPES) uint8
    anchor_timestamps: np.ndarray   # datetime64[D], increasing
    horizon_end: np.ndarray         # datetime64[D], last day of each label window
    feature_names: tuple[str, ...]
    lookback: int
    horizon: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.anchor_timestamps = np.asarray(self.anchor_timestamps, dtype="datetime64[D]")
        self.horizon_end = np.asarray(self.horizon_end, dtype="datetime64[D]")
        n = self.inputs.shape[0]
        if self.inputs.ndim != 3 or self.labels.shape != (n, N_RISK_TYPES):
            raise ValueError("inputs must be (N, lookback, features) and labels (N, n_risk_types)")
        if len(self.anchor_timestamps) != n or len(self.horizon_end) != n:
            raise ValueError("one anchor and horizon end per sample")
        if n > 1 and not (np.diff(self.anchor_timestamps) > np.timedelta64(0, "D")).all():
            raise ValueError("anchors must be increasing")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_features(self) -> int:
        return self.inputs.shape[2]

    def subset(self, idx) -> "SampleSet":
        idx = np.arange(len(self))[idx]
        return SampleSet(self.inputs[idx], self.labels[idx], self.anchor_timestamps[idx],
                         self.horizon_end[idx], self.feature_names, self.lookback, self.horizon,
                         dict(self.meta))

    def last_rows(self) -> np.ndarray:
        """Most recent feature row of every window: the tree models' input."""
        return self.inputs[:, -1, :]

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"format": "riskwatch.samples", "version": 1, "n_samples": len(self),
                "lookback": self.lookback, "horizon": self.horizon,
                "feature_names": list(self.feature_names),
                "risk_types": [r.value for r in RISK_TYPES], **self.meta}
        (d / "meta.json").write_text(json.dumps(meta, indent=2))
        stamps = np.datetime_as_string(self.anchor_timestamps, unit="D")
        ends = np.datetime_as_string(self.horizon_end, unit="D")
        with open(d / "samples.jsonl", "w", encoding="utf-8") as fh:
            for k in range(len(self)):
                fh.write(json.dumps({"anchor": stamps[k], "horizon_end": ends[k],
                                     "labels": self.labels[k].tolist(),
                                     "input": self.inputs[k].tolist()}) + "\n")

    @classmethod
    def read(cls, directory) -> "SampleSet":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        anchors, ends, labels, inputs = [], [], [], []
        with open(d / "samples.jsonl", encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                anchors.append(obj["anchor"])
                ends.append(obj["horizon_end"])
                labels.append(obj["labels"])
                inputs.append(obj["input"])
        names = tuple(meta.pop("feature_names"))
        lookback, horizon = meta.pop("lookback"), meta.pop("horizon")
        for key in ("format", "version", "n_samples", "risk_types"):
            meta.pop(key, None)
        inputs_arr = np.array(inputs, dtype=np.float64).reshape(len(inputs), lookback, len(names))
        return cls(inputs_arr, np.array(labels, dtype=np.uint8).reshape(len(labels), N_RISK_TYPES),
                   np.array(anchors, dtype="datetime64[D]"), np.array(ends, dtype="datetime64[D]"),
                   names, lookback, horizon, meta)


def make_samples(m: FeatureMatrix, labels: np.ndarray, lookback: int = 30, horizon: int = 30) -> SampleSet:
    """Cut (input window, future label) pairs.

    Anchor ``t`` runs from ``lookback`` to ``n - horizon - 1``: inputs are rows
    ``(t - lookback, t]`` and label ``r`` is 1 iff risk ``r`` is active on any
    row in ``(t, t + horizon]``. Row 0 is warm-up (no return exists there),
    so there are ``n - lookback - horizon`` samples.
    """
    if lookback < 1 or horizon < 1:
        raise ValueError("lookback and horizon must be >= 1")
    labels = np.asarray(labels, dtype=bool)
    n = len(m)
    if labels.shape != (n, N_RISK_TYPES):
        raise ValueError(f"labels must have shape ({n}, {N_RISK_TYPES})")
    count = n - lookback - horizon
    if count < 1:
        raise InsufficientDataError(
            f"{n} rows cannot hold lookback {lookback} + horizon {horizon} + 1 warm-up row")
    if m.missing_mask.any():
        raise MissingDataError("feature matrix has missing cells")
    anchors = np.arange(lookback, lookback + count)
    windows = sliding_window_view(m.values, lookback, axis=0)  # (n-L+1, p, L)
    inputs = np.ascontiguousarray(windows[anchors - lookback + 1].transpose(0, 2, 1))
    future = sliding_window_view(labels, horizon, axis=0)      # (n-H+1, R, H)
    y = future[anchors + 1].any(axis=-1).astype(np.uint8)
    return SampleSet(inputs, y, m.timestamps[anchors], m.timestamps[anchors + horizon],
                     m.feature_names, lookback, horizon)


# ---------------------------------------------------------------------------
# end-to-end batch preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    raw_columns: tuple[str, ...]
    features: FeatureMatrix          # normalised
    labels: np.ndarray               # per grid day
    samples: SampleSet
    normalizer: NormalizationParams
    robust: RobustScale              # fitted on training rows of the raw features
    train_rows: int


def prepare(records: RecordSet, lookback: int = 30, horizon: int = 30,
            z_threshold: float = 8.0, train_fraction: float = 0.8) -> PreparedData:
    """records -> fill -> features -> outlier cleaning -> fill -> normalise -> samples.

    Outliers are flagged on the (stationary) feature columns rather than raw
    price levels; normalisation moments come from the first
    ``train_fraction`` of grid rows only.
    """
    raw, labels = pivot_records(records)
    raw = fill_missing(raw)
    feats = features_from_raw(raw)
    n_train = max(1, int(round(train_fraction * len(feats))))
    robust = fit_robust_scale(feats, slice(0, n_train))
    feats = fill_missing(clean_outliers(feats, z_threshold, robust))
    norm = fit_normalizer(feats, slice(0, n_train))
    normed = apply_normalizer(feats, norm)
    samples = make_samples(normed, labels, lookback, horizon)
    return PreparedData(raw.feature_names, normed, labels, samples, norm, robust, n_train)
