"""In-process event-time stream core.

Events carry millisecond event times. Watermarks follow a bounded
out-of-orderness policy; windows are end-exclusive and fire once when the
watermark reaches their end. Aggregates are maintained incrementally with
Welford updates. A pipeline partitions keys across workers, fires windows,
scores each completed window batch and runs the alert hysteresis.
"""
from __future__ import annotations

import json
import logging
import math
import operator
import time
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .alert import AlertEvent, AlertTracker, BayesModel, CostSpec, optimal_threshold
from .taxonomy import RISK_TYPES

logger = logging.getLogger(__name__)

DAY_MS = 86_400_000
DEFAULT_BOUND_MS = 2_000
NEG_INF = -math.inf


# ---------------------------------------------------------------------------
# events and windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class StreamEvent:
    event_time: int
    key: str
    payload: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not isinstance(self.event_time, (int, np.integer)):
            raise TypeError("event_time must be an integer number of milliseconds")
        if not self.key:
            raise ValueError("event key must be non-empty")

    @classmethod
    def of(cls, event_time: int, key: str, values: Mapping[str, float]) -> "StreamEvent":
        payload = tuple(sorted((str(k), float(v)) for k, v in values.items()
                               if v is not None and not (isinstance(v, float) and math.isnan(v))))
        return cls(int(event_time), key, payload)

    @property
    def values(self) -> dict[str, float]:
        return dict(self.payload)

    def to_json(self) -> dict:
        return {"event_time": self.event_time, "key": self.key, "payload": dict(self.payload)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "StreamEvent":
        return cls.of(int(obj["event_time"]), str(obj["key"]), obj.get("payload", {}))


@dataclass(frozen=True)
class WindowSpec:
    kind: str = "tumbling"
    size: int = DAY_MS
    slide: int | None = None
    allowed_lateness: int = 0
    emit_empty: bool = False

    def __post_init__(self):
        if self.kind not in ("tumbling", "sliding"):
            raise ValueError(f"window kind must be tumbling or sliding, got {self.kind!r}")
        if self.size <= 0:
            raise ValueError("window size must be positive")
        if self.kind == "sliding" and (self.slide is None or not 0 < self.slide <= self.size):
            raise ValueError("sliding windows need 0 < slide <= size")
        if self.allowed_lateness < 0:
            raise ValueError("allowed lateness must be >= 0")

    @property
    def step(self) -> int:
        return self.size if self.kind == "tumbling" else self.slide


def assign_windows(e, spec: WindowSpec) -> list[tuple[int, int]]:
    """Windows ``[start, end)`` containing the event time, in ascending order."""
    t = e.event_time if isinstance(e, StreamEvent) else int(e)
    if spec.kind == "tumbling":
        start = (t // spec.size) * spec.size
        return [(start, start + spec.size)]
    start = (t // spec.slide) * spec.slide
    out = []
    while start + spec.size > t:
        out.append((start, start + spec.size))
        start -= spec.slide
    out.reverse()
    return out


@dataclass(frozen=True)
class Watermark:
    time: float


def advance_watermark(source_times, bound: int = DEFAULT_BOUND_MS, current: Watermark | None = None) -> Watermark:
    """min over sources of (max observed time - bound), never below ``current``."""
    times = list(source_times.values()) if isinstance(source_times, Mapping) else list(source_times)
    if not times:
        raise ValueError("need at least one source")
    wm = min(times) - bound
    if current is not None:
        wm = max(wm, current.time)
    return Watermark(wm)


class WatermarkTracker:
    """Per-source maxima; finished sources stop holding the watermark back."""

    def __init__(self, bound: int = DEFAULT_BOUND_MS, sources: Iterable[str] = ()):
        self.bound = bound
        self._max: dict[str, float] = {s: NEG_INF for s in sources}
        self._finished: set[str] = set()
        self._wm = NEG_INF

    def observe(self, source: str, t: int) -> None:
        if t > self._max.get(source, NEG_INF):
            self._max[source] = t

    def finish(self, source: str) -> None:
        self._finished.add(source)

    def current(self) -> float:
        active = [m for s, m in self._max.items() if s not in self._finished]
        if active:
            candidate = min(active) - self.bound
        elif self._max:
            candidate = math.inf
        else:
            candidate = NEG_INF
        self._wm = max(self._wm, candidate)
        return self._wm


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class FieldStats:
    count: int = 0
    sum: float = 0.0
    mean: float = 0.0
    m2: float = 0.0
    min: float = math.inf
    max: float = -math.inf
    last: float = math.nan
    last_key: tuple = ()

    def update(self, v: float, order_key: tuple) -> None:
        self.count += 1
        self.sum += v
        delta = v - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (v - self.mean)
        if v < self.min:
            self.min = v
        if v > self.max:
            self.max = v
        if not self.last_key or order_key > self.last_key:
            self.last = v
            self.last_key = order_key

    @property
    def variance(self) -> float:
        """Sample variance (n - 1 denominator); 0 for a single value."""
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    def copy(self) -> "FieldStats":
        return FieldStats(self.count, self.sum, self.mean, self.m2, self.min, self.max, self.last, self.last_key)

    def to_json(self) -> dict:
        return {"count": self.count, "sum": self.sum, "mean": self.mean, "variance": self.variance,
                "min": self.min, "max": self.max, "last": self.last}


@dataclass
class AggregateResult:
    key: str
    start: int
    end: int
    count: int
    fields: dict[str, FieldStats]
    late_update: bool = False

    @property
    def window(self) -> tuple[int, int]:
        return (self.start, self.end)

    def to_json(self) -> dict:
        return {"key": self.key, "start": self.start, "end": self.end, "count": self.count,
                "late_update": self.late_update,
                "fields": {k: v.to_json() for k, v in sorted(self.fields.items())}}


def _order_key(e: StreamEvent) -> tuple:
    return (e.event_time, e.payload)


class _WindowState:
    __slots__ = ("count", "fields", "fired", "dirty")

    def __init__(self):
        self.count = 0
        self.fields: dict[str, FieldStats] = {}
        self.fired = False
        self.dirty = False

    def add(self, e: StreamEvent) -> None:
        self.count += 1
        ok = _order_key(e)
        for name, v in e.payload:
            fs = self.fields.get(name)
            if fs is None:
                fs = self.fields[name] = FieldStats()
            fs.update(v, ok)


class WindowOperator:
    """Keyed window state for one partition of keys."""

    def __init__(self, spec: WindowSpec):
        self.spec = spec
        self._state: dict[tuple[str, int, int], _WindowState] = {}
        self._seen: dict[tuple[str, int, int], set] = {}
        self._last_fired_end: dict[str, int] = {}
        self._fired_wm = NEG_INF
        self.dropped = 0
        self.duplicates = 0
        self.late_events = 0

    def process(self, e: StreamEvent, watermark: float) -> str:
        """Fold one event in; returns 'ok', 'late', 'duplicate' or 'dropped'."""
        lateness = self.spec.allowed_lateness
        accepted = False
        late = False
        duplicate = False
        for start, end in assign_windows(e, self.spec):
            if end + lateness <= watermark:
                continue  # window state already purged
            wid = (e.key, start, end)
            seen = self._seen.setdefault(wid, set())
            if e in seen:
                duplicate = True
                continue
            seen.add(e)
            st = self._state.get(wid)
            if st is None:
                st = self._state[wid] = _WindowState()
                if end <= watermark:
                    # the window's primary emission is already past
                    st.fired = True
            st.add(e)
            if st.fired:
                st.dirty = True
                late = True
            accepted = True
        if accepted:
            if late:
                self.late_events += 1
                return "late"
            return "ok"
        if duplicate:
            self.duplicates += 1
            return "duplicate"
        self.dropped += 1
        return "dropped"

    def fire(self, watermark: float) -> list[AggregateResult]:
        if watermark < self._fired_wm:
            raise RuntimeError(f"watermark regressed from {self._fired_wm} to {watermark}")
        self._fired_wm = watermark
        out = []
        for wid, st in self._state.items():
            key, start, end = wid
            if end > watermark:
                continue
            if not st.fired:
                st.fired = True
                out.append(AggregateResult(key, start, end, st.count,
                                           {k: v.copy() for k, v in st.fields.items()}))
                self._last_fired_end[key] = max(self._last_fired_end.get(key, end), end)
            elif st.dirty:
                st.dirty = False
                out.append(AggregateResult(key, start, end, st.count,
                                           {k: v.copy() for k, v in st.fields.items()}, late_update=True))
        if self.spec.emit_empty:
            out.extend(self._empty_windows(watermark))
        lateness = self.spec.allowed_lateness
        for wid in [w for w in self._state if w[2] + lateness <= watermark]:
            del self._state[wid]
            self._seen.pop(wid, None)
        out.sort(key=lambda r: (r.end, r.key, r.start, r.late_update))
        return out

    def _empty_windows(self, watermark: float) -> list[AggregateResult]:
        out = []
        step, size = self.spec.step, self.spec.size
        for key, last_end in list(self._last_fired_end.items()):
            end = last_end + step
            while end <= watermark and math.isfinite(watermark):
                if (key, end - size, end) not in self._state:
                    out.append(AggregateResult(key, end - size, end, 0, {}))
                end += step
        return out

    @property
    def open_windows(self) -> int:
        return sum(1 for st in self._state.values() if not st.fired)


def fire_windows(state: WindowOperator, wm: Watermark | float) -> list[AggregateResult]:
    return state.fire(wm.time if isinstance(wm, Watermark) else wm)


def batch_aggregate(events: Iterable[StreamEvent], spec: WindowSpec) -> dict[tuple[str, int, int], AggregateResult]:
    """Two-pass recomputation of every window's aggregates (the stream oracle)."""
    groups: dict[tuple[str, int, int], set] = defaultdict(set)
    for e in events:
        for start, end in assign_windows(e, spec):
            groups[(e.key, start, end)].add(e)
    out = {}
    for wid, evs in groups.items():
        per_field: dict[str, list] = defaultdict(list)
        for e in sorted(evs, key=_order_key):
            for name, v in e.payload:
                per_field[name].append((v, _order_key(e)))
        fields = {}
        for name, vals in per_field.items():
            x = np.array([v for v, _ in vals])
            mean = float(x.mean())
            n = x.size
            m2 = float(np.sum((x - mean) ** 2))
            fields[name] = FieldStats(n, float(np.sum(x)), mean, m2, float(x.min()), float(x.max()),
                                      vals[-1][0], vals[-1][1])
        out[wid] = AggregateResult(wid[0], wid[1], wid[2], len(evs), fields)
    return out


# ---------------------------------------------------------------------------
# pattern matching
# ---------------------------------------------------------------------------

_OPS = {"<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
        "==": operator.eq, "!=": operator.ne}


@dataclass(frozen=True)
class Predicate:
    field: str
    op: str
    value: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown comparison {self.op!r}")

    def __call__(self, values: Mapping[str, float]) -> bool:
        v = values.get(self.field)
        return v is not None and _OPS[self.op](v, self.value)


@dataclass(frozen=True)
class PatternSpec:
    steps: tuple[Predicate, ...]
    length: int
    within: int
    contiguity: str = "strict"
    name: str = "pattern"

    def __post_init__(self):
        if self.length < 1 or self.within <= 0:
            raise ValueError("pattern length must be >= 1 and within > 0")
        if not self.steps or len(self.steps) not in (1, self.length):
            raise ValueError("give one predicate per step, or one predicate for all steps")
        if self.contiguity not in ("strict", "relaxed"):
            raise ValueError("contiguity must be strict or relaxed")

    def step(self, k: int) -> Predicate:
        return self.steps[0] if len(self.steps) == 1 else self.steps[k]


@dataclass(frozen=True)
class PatternMatch:
    pattern: str
    key: str
    event_times: tuple[int, ...]

    @property
    def start(self) -> int:
        return self.event_times[0]

    @property
    def end(self) -> int:
        return self.event_times[-1]


def match_pattern(events: Sequence[StreamEvent], p: PatternSpec) -> list[PatternMatch]:
    """All matches per key; every qualifying start yields at most one match."""
    by_key: dict[str, list[StreamEvent]] = defaultdict(list)
    for e in events:
        by_key[e.key].append(e)
    out = []
    for key in sorted(by_key):
        evs = by_key[key]
        if any(evs[i].event_time > evs[i + 1].event_time for i in range(len(evs) - 1)):
            raise ValueError(f"events for {key} are not in event-time order")
        vals = [e.values for e in evs]
        for i in range(len(evs)):
            if not p.step(0)(vals[i]):
                continue
            picked = [i]
            j = i + 1
            while len(picked) < p.length and j < len(evs):
                if evs[j].event_time - evs[i].event_time > p.within:
                    break
                if p.step(len(picked))(vals[j]):
                    picked.append(j)
                elif p.contiguity == "strict":
                    break
                j += 1
            if len(picked) == p.length and evs[picked[-1]].event_time - evs[i].event_time <= p.within:
                out.append(PatternMatch(p.name, key, tuple(evs[k].event_time for k in picked)))
    return out


class PatternMatcher:
    """Incremental matcher over per-key streams that arrive in time order."""

    def __init__(self, patterns: Sequence[PatternSpec]):
        self.patterns = list(patterns)
        self._buf: dict[str, list[StreamEvent]] = defaultdict(list)

    def push(self, e: StreamEvent) -> list[PatternMatch]:
        out = []
        buf = self._buf[e.key]
        buf.append(e)
        horizon = max((p.within for p in self.patterns), default=0)
        while buf and e.event_time - buf[0].event_time > horizon:
            buf.pop(0)
        for p in self.patterns:
            # report only matches completed by the new event
            out.extend(m for m in match_pattern(buf, p) if m.end == e.event_time)
        return out


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

class WindowScorer(Protocol):
    def score(self, start: int, end: int, batch: dict[str, AggregateResult]):
        """Return ``(timestamp, scores[R], detail)`` for one completed window, or None."""


@dataclass
class PipelineConfig:
    window: WindowSpec = field(default_factory=WindowSpec)
    watermark_bound: int = DEFAULT_BOUND_MS
    n_workers: int = 1
    micro_batch: int = 1024
    patterns: tuple[PatternSpec, ...] = ()

    def __post_init__(self):
        if self.n_workers < 1 or self.micro_batch < 1:
            raise ValueError("n_workers and micro_batch must be >= 1")


@dataclass
class Assessment:
    timestamp: str
    window: tuple[int, int]
    scores: np.ndarray
    posterior: np.ndarray
    detail: object = None


@dataclass
class PipelineOutput:
    aggregates: list[AggregateResult] = field(default_factory=list)
    revisions: list[AggregateResult] = field(default_factory=list)
    assessments: list[Assessment] = field(default_factory=list)
    alerts: list[AlertEvent] = field(default_factory=list)
    matches: list[PatternMatch] = field(default_factory=list)


def percentiles(samples) -> dict[str, float]:
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        return {"p50": 0.0, "p95": 0.0, "p99": 0.0}
    p50, p95, p99 = np.percentile(x, [50, 95, 99])
    return {"p50": float(p50), "p95": float(p95), "p99": float(p99)}


@dataclass
class PipelineMetrics:
    events_in: int = 0
    events_accepted: int = 0
    duplicates: int = 0
    dropped_late: int = 0
    late_updates: int = 0
    windows_fired: int = 0
    assessments: int = 0
    alerts: int = 0
    stage_seconds: dict[str, float] = field(default_factory=lambda: {
        "ingest": 0.0, "window": 0.0, "score": 0.0, "alert": 0.0})
    latencies_ms: list[float] = field(default_factory=list)

    def throughput(self) -> dict[str, float]:
        return {k: (self.events_in / s if s > 0 and self.events_in else 0.0)
                for k, s in self.stage_seconds.items()}

    def to_json(self) -> dict:
        return {"events_in": self.events_in, "events_accepted": self.events_accepted,
                "duplicates": self.duplicates, "dropped_late": self.dropped_late,
                "late_updates": self.late_updates, "windows_fired": self.windows_fired,
                "assessments": self.assessments, "alerts": self.alerts,
                "stage_seconds": dict(self.stage_seconds),
                "throughput_events_per_s": self.throughput(),
                "latency_ms": percentiles(self.latencies_ms)}


def partition(key: str, n_workers: int) -> int:
    return zlib.crc32(key.encode()) % n_workers


class StreamPipeline:
    """ingest -> keyed windows -> window scoring -> Bayes posterior -> alert hysteresis.

    Lateness decisions inside one micro-batch use the watermark in force at
    the start of the batch, so results depend only on the arrival sequence
    and the batch size, never on the number of workers.
    """

    def __init__(self, config: PipelineConfig, scorer: WindowScorer | None = None,
                 bayes: BayesModel | None = None, cost: CostSpec | None = None):
        self.config = config
        self.scorer = scorer
        self.bayes = bayes
        self.cost = cost or CostSpec()
        self.tracker = AlertTracker(optimal_threshold(self.cost))
        self.watermarks = WatermarkTracker(config.watermark_bound)
        self.workers = [WindowOperator(config.window) for _ in range(config.n_workers)]
        self._pool = ThreadPoolExecutor(config.n_workers) if config.n_workers > 1 else None
        self._matcher = PatternMatcher(config.patterns) if config.patterns else None
        self._pending: list[tuple[StreamEvent, str]] = []
        self._ingest_times: dict[int, list[float]] = defaultdict(list)
        self.output = PipelineOutput()
        self.metrics = PipelineMetrics()
        self._wm = NEG_INF

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def watermark(self) -> float:
        return self._wm

    def push(self, e: StreamEvent, source: str = "default") -> None:
        self._pending.append((e, source))
        if len(self._pending) >= self.config.micro_batch:
            self._drain()

    def push_many(self, events: Iterable[StreamEvent], source: str = "default") -> None:
        for e in events:
            self.push(e, source)

    def finish_source(self, source: str) -> None:
        self._drain()
        self.watermarks.finish(source)
        self._advance(self.watermarks.current())

    def advance_to(self, wm: float) -> None:
        """Force the watermark forward (e.g. end of an uploaded batch)."""
        self._drain()
        self._advance(max(wm, self.watermarks.current()))

    def flush(self) -> PipelineOutput:
        self._drain()
        self._advance(math.inf)
        return self.output

    # -- internals -------------------------------------------------------

    def _drain(self) -> None:
        if not self._pending:
            return
        batch, self._pending = self._pending, []
        t0 = time.perf_counter()
        wm = self._wm
        n = len(self.workers)
        parts: list[list[StreamEvent]] = [[] for _ in range(n)]
        for e, source in batch:
            parts[partition(e.key, n)].append(e)
            self.watermarks.observe(source, e.event_time)

        def run(k):
            op = self.workers[k]
            return [(e, op.process(e, wm)) for e in parts[k]]

        if self._pool is not None:
            results = list(self._pool.map(run, range(n)))
        else:
            results = [run(k) for k in range(n)]
        for res in results:
            for e, status in res:
                if status in ("ok", "late"):
                    self._ingest_times[assign_windows(e, self.config.window)[0][1]].append(t0)
        self.metrics.events_in += len(batch)
        self.metrics.stage_seconds["ingest"] += time.perf_counter() - t0
        self._advance(self.watermarks.current())

    def _advance(self, wm: float) -> None:
        if wm < self._wm:
            raise RuntimeError(f"watermark regressed from {self._wm} to {wm}")
        self._wm = wm
        t0 = time.perf_counter()
        fired: list[AggregateResult] = []
        for op in self.workers:
            fired.extend(op.fire(wm))
        fired.sort(key=lambda r: (r.end, r.key, r.start, r.late_update))
        self.metrics.stage_seconds["window"] += time.perf_counter() - t0
        self._sync_counters()
        primary = [r for r in fired if not r.late_update]
        self.output.aggregates.extend(primary)
        self.output.revisions.extend(r for r in fired if r.late_update)
        self.metrics.windows_fired += len(primary)
        if self._matcher is not None:
            for r in primary:
                vals = {k: v.last for k, v in r.fields.items()}
                self.output.matches.extend(self._matcher.push(StreamEvent.of(r.start, r.key, vals)))
        by_window: dict[tuple[int, int], dict[str, AggregateResult]] = {}
        for r in primary:
            by_window.setdefault((r.end, r.start), {})[r.key] = r
        for (end, start) in sorted(by_window):
            self._score_window(start, end, by_window[(end, start)])
        done = time.perf_counter()
        for end in [k for k in self._ingest_times if k <= wm]:
            self.metrics.latencies_ms.extend((done - t) * 1e3 for t in self._ingest_times.pop(end))

    def _score_window(self, start: int, end: int, batch: dict[str, AggregateResult]) -> None:
        if self.scorer is None:
            return
        t0 = time.perf_counter()
        res = self.scorer.score(start, end, batch)
        t1 = time.perf_counter()
        self.metrics.stage_seconds["score"] += t1 - t0
        if res is None:
            return
        ts, scores, detail = res
        scores = np.asarray(scores, dtype=np.float64)
        post = self.bayes.posteriors(scores) if self.bayes is not None else scores
        self.output.assessments.append(Assessment(ts, (start, end), scores, post, detail))
        self.metrics.assessments += 1
        source = f"{start}-{end}"
        for r, rt in enumerate(RISK_TYPES[: len(post)]):
            ev = self.tracker.update(ts, rt, float(post[r]), source)
            if ev is not None:
                self.output.alerts.append(ev)
                self.metrics.alerts += 1
        self.metrics.stage_seconds["alert"] += time.perf_counter() - t1

    def _sync_counters(self) -> None:
        m = self.metrics
        m.duplicates = sum(op.duplicates for op in self.workers)
        m.dropped_late = sum(op.dropped for op in self.workers)
        m.late_updates = sum(op.late_events for op in self.workers)
        m.events_accepted = m.events_in - m.duplicates - m.dropped_late


def interleave(sources: Sequence[Iterable[StreamEvent]]) -> Iterator[tuple[StreamEvent, str]]:
    """Round-robin merge of several sources, tagging each event with its source id."""
    iters = [(f"source-{k}", iter(s)) for k, s in enumerate(sources)]
    while iters:
        alive = []
        for name, it in iters:
            e = next(it, None)
            if e is not None:
                yield e, name
                alive.append((name, it))
        iters = alive


def run_pipeline(sources, config: PipelineConfig | None = None, scorer: WindowScorer | None = None,
                 bayes: BayesModel | None = None, cost: CostSpec | None = None):
    """Replay bounded sources to completion; returns (output, metrics)."""
    config = config or PipelineConfig()
    if sources and isinstance(sources[0], StreamEvent):
        sources = [sources]
    with StreamPipeline(config, scorer, bayes, cost) as pipe:
        for e, src in interleave(sources):
            pipe.push(e, src)
        out = pipe.flush()
    return out, pipe.metrics


def batch_pipeline(events: Iterable[StreamEvent], config: PipelineConfig | None = None,
                   scorer: WindowScorer | None = None, bayes: BayesModel | None = None,
                   cost: CostSpec | None = None) -> PipelineOutput:
    """Recompute the pipeline's outputs from the full event set in one pass."""
    config = config or PipelineConfig()
    cost = cost or CostSpec()
    aggs = batch_aggregate(events, config.window)
    out = PipelineOutput()
    out.aggregates = sorted(aggs.values(), key=lambda r: (r.end, r.key, r.start))
    by_window: dict[tuple[int, int], dict[str, AggregateResult]] = {}
    for r in out.aggregates:
        by_window.setdefault((r.end, r.start), {})[r.key] = r
    tracker = AlertTracker(optimal_threshold(cost))
    if scorer is not None:
        for (end, start) in sorted(by_window):
            res = scorer.score(start, end, by_window[(end, start)])
            if res is None:
                continue
            ts, scores, detail = res
            scores = np.asarray(scores, dtype=np.float64)
            post = bayes.posteriors(scores) if bayes is not None else scores
            out.assessments.append(Assessment(ts, (start, end), scores, post, detail))
            for r, rt in enumerate(RISK_TYPES[: len(post)]):
                ev = tracker.update(ts, rt, float(post[r]), f"{start}-{end}")
                if ev is not None:
                    out.alerts.append(ev)
    return out


# ---------------------------------------------------------------------------
# replay I/O
# ---------------------------------------------------------------------------

def write_events(path, events: Iterable[StreamEvent]) -> int:
    n = 0
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e.to_json()) + "\n")
            n += 1
    return n


def read_events(path) -> list[StreamEvent]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(StreamEvent.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad event ({exc})") from None
    return out
