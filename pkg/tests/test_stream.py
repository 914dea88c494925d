from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from riskwatch.alert import AlertTracker, CostSpec, optimal_threshold
from riskwatch.stream import (
    DAY_MS,
    FieldStats,
    PatternMatcher,
    PatternSpec,
    PipelineConfig,
    Predicate,
    StreamEvent,
    StreamPipeline,
    WatermarkTracker,
    Watermark,
    WindowOperator,
    WindowSpec,
    advance_watermark,
    assign_windows,
    batch_aggregate,
    batch_pipeline,
    fire_windows,
    match_pattern,
    percentiles,
    read_events,
    run_pipeline,
    write_events,
)
from riskwatch.taxonomy import RISK_TYPES

MIN = 60_000


def ev(t, key="a", **values):
    return StreamEvent.of(t, key, values)


# ---------------------------------------------------------------------------
# window assignment and watermarks
# ---------------------------------------------------------------------------

def test_tumbling_window_end_is_exclusive():
    spec = WindowSpec("tumbling", MIN)
    assert assign_windows(59_999, spec) == [(0, 60_000)]
    assert assign_windows(60_000, spec) == [(60_000, 120_000)]


def test_sliding_windows_covering_an_event():
    spec = WindowSpec("sliding", MIN, slide=30_000)
    assert assign_windows(ev(45_000), spec) == [(0, 60_000), (30_000, 90_000)]


@given(st.integers(0, 10**9), st.integers(1, 10**6), st.integers(1, 10**6))
def test_sliding_window_count_and_coverage(t, size, slide):
    slide = min(slide, size)
    wins = assign_windows(t, WindowSpec("sliding", size, slide=slide))
    assert all(s <= t < e and e - s == size and s % slide == 0 for s, e in wins)
    # every multiple of slide in (t - size, t] starts a covering window
    expected = t // slide - (t - size) // slide
    assert len(wins) == expected
    if size % slide == 0:
        assert expected == size // slide
    else:
        assert expected in (size // slide, size // slide + 1)


@pytest.mark.parametrize("kwargs", [dict(kind="hopping"), dict(size=0), dict(kind="sliding", slide=None),
                                    dict(kind="sliding", size=10, slide=11), dict(allowed_lateness=-1)])
def test_window_spec_rejects_bad_settings(kwargs):
    with pytest.raises(ValueError):
        WindowSpec(**kwargs)


def test_watermark_examples():
    assert advance_watermark([100], bound=10) == Watermark(90)
    assert advance_watermark({"x": 100, "y": 50}, bound=0) == Watermark(50)
    wm = advance_watermark([100], bound=10)
    assert advance_watermark([80], bound=10, current=wm) == wm


def test_watermark_tracker_ignores_older_events_and_finished_sources():
    tr = WatermarkTracker(bound=10)
    tr.observe("x", 100)
    assert tr.current() == 90
    tr.observe("x", 40)
    assert tr.current() == 90
    tr.observe("y", 50)
    assert tr.current() == 90   # never moves backwards
    tr.finish("x")
    tr.finish("y")
    assert tr.current() == math.inf


@given(st.lists(st.tuples(st.sampled_from("xyz"), st.integers(0, 10_000)), max_size=60))
def test_watermark_is_non_decreasing(observations):
    tr = WatermarkTracker(bound=100)
    last = -math.inf
    for src, t in observations:
        tr.observe(src, t)
        wm = tr.current()
        assert wm >= last
        last = wm


# ---------------------------------------------------------------------------
# aggregation and firing
# ---------------------------------------------------------------------------

def test_fire_one_window_mean_and_variance():
    op = WindowOperator(WindowSpec("tumbling", MIN))
    for t, v in [(1, 1.0), (2, 2.0), (3, 3.0)]:
        assert op.process(ev(t, v=v), -math.inf) == "ok"
    assert fire_windows(op, Watermark(59_999)) == []
    (res,) = fire_windows(op, Watermark(60_000))
    fs = res.fields["v"]
    assert (res.count, fs.mean, fs.variance, fs.min, fs.max, fs.last) == (3, 2.0, 1.0, 1.0, 3.0, 3.0)
    oracle = batch_aggregate([ev(1, v=1.0), ev(2, v=2.0), ev(3, v=3.0)], WindowSpec("tumbling", MIN))
    assert res.to_json() == oracle[("a", 0, MIN)].to_json()
    assert fire_windows(op, Watermark(10**9)) == []


def test_empty_windows_are_silent_by_default():
    events = [ev(10, v=1.0), ev(3 * MIN + 10, v=2.0)]
    for emit_empty, expected in [(False, [(0, 1)]), (True, [(0, 1), (MIN, 0), (2 * MIN, 0), (3 * MIN, 1)])]:
        op = WindowOperator(WindowSpec("tumbling", MIN, emit_empty=emit_empty))
        fired = []
        for e in events:
            op.process(e, -math.inf)
            fired += op.fire(e.event_time)
        fired += op.fire(4 * MIN)
        got = [(r.start, r.count) for r in fired]
        if not emit_empty:
            expected = [(0, 1), (3 * MIN, 1)]
        assert got == expected


def test_late_event_inside_lateness_emits_revision_matching_batch():
    spec = WindowSpec("tumbling", 1000, allowed_lateness=5000)
    pipe = StreamPipeline(PipelineConfig(spec, watermark_bound=0, micro_batch=1))
    events = [ev(100, v=1.0), ev(200, v=2.0), ev(1500, v=9.0), ev(300, v=4.0)]
    pipe.push_many(events)
    out = pipe.flush()
    assert [(r.start, r.count) for r in out.aggregates] == [(0, 2), (1000, 1)]
    (rev,) = out.revisions
    assert rev.late_update and rev.window == (0, 1000)
    assert rev.to_json() == {**batch_aggregate(events, spec)[("a", 0, 1000)].to_json(), "late_update": True}
    assert pipe.metrics.late_updates == 1


def test_event_beyond_lateness_is_dropped():
    spec = WindowSpec("tumbling", 1000, allowed_lateness=500)
    pipe = StreamPipeline(PipelineConfig(spec, watermark_bound=0, micro_batch=1))
    pipe.push_many([ev(100, v=1.0), ev(5000, v=2.0), ev(200, v=3.0)])
    out = pipe.flush()
    assert [r.count for r in out.aggregates] == [1, 1]
    assert out.revisions == []
    assert pipe.metrics.dropped_late == 1
    assert pipe.metrics.events_accepted == 2


def test_duplicate_event_is_deduplicated():
    spec = WindowSpec("tumbling", 1000)
    e = ev(100, v=1.5)
    out, metrics = run_pipeline([e, ev(120, v=2.0), e], PipelineConfig(spec, watermark_bound=0))
    single, _ = run_pipeline([e, ev(120, v=2.0)], PipelineConfig(spec, watermark_bound=0))
    assert [r.to_json() for r in out.aggregates] == [r.to_json() for r in single.aggregates]
    assert metrics.duplicates == 1 and metrics.events_in == 3 and metrics.events_accepted == 2


def test_same_time_different_payload_is_not_a_duplicate():
    out, metrics = run_pipeline([ev(100, v=1.0), ev(100, v=2.0)], PipelineConfig(WindowSpec("tumbling", 1000)))
    assert out.aggregates[0].count == 2 and metrics.duplicates == 0


def test_watermark_regression_raises():
    op = WindowOperator(WindowSpec("tumbling", 1000))
    op.fire(5000)
    with pytest.raises(RuntimeError):
        op.fire(4000)
    pipe = StreamPipeline(PipelineConfig())
    pipe._advance(100)
    with pytest.raises(RuntimeError):
        pipe._advance(50)


def test_zero_events_give_zero_outputs():
    out, metrics = run_pipeline([], PipelineConfig())
    assert (out.aggregates, out.revisions, out.assessments, out.alerts, out.matches) == ([], [], [], [], [])
    m = metrics.to_json()
    for k in ("events_in", "events_accepted", "duplicates", "dropped_late", "late_updates",
              "windows_fired", "assessments", "alerts"):
        assert m[k] == 0
    assert set(m["throughput_events_per_s"].values()) == {0.0}
    assert m["latency_ms"] == {"p50": 0.0, "p95": 0.0, "p99": 0.0}


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200))
def test_welford_matches_two_pass(xs):
    fs = FieldStats()
    for k, x in enumerate(xs):
        fs.update(x, (k,))
    a = np.array(xs)
    scale = max(1.0, float(np.abs(a).max()))
    assert abs(fs.mean - a.mean()) <= 1e-9 * scale
    if len(xs) > 1:
        assert abs(fs.variance - a.var(ddof=1)) <= 1e-9 * scale * scale
    else:
        assert fs.variance == 0.0
    assert fs.last == xs[-1] and fs.min == a.min() and fs.max == a.max()


def test_percentiles_are_ordered():
    p = percentiles(np.random.default_rng(0).exponential(size=500))
    assert p["p50"] <= p["p95"] <= p["p99"]


# ---------------------------------------------------------------------------
# patterns
# ---------------------------------------------------------------------------

NEG3 = PatternSpec((Predicate("r", "<", 0.0),), length=3, within=10_000, name="three_down")


def returns(*rs):
    return [ev(1000 * k, r=r) for k, r in enumerate(rs)]


def test_three_negative_returns_match_once():
    (m,) = match_pattern(returns(-1, -1, -1), NEG3)
    assert m.event_times == (0, 1000, 2000) and m.pattern == "three_down"


def test_four_negative_returns_give_two_overlapping_matches():
    ms = match_pattern(returns(-1, -1, -1, -1), NEG3)
    assert [m.event_times for m in ms] == [(0, 1000, 2000), (1000, 2000, 3000)]


def test_within_smaller_than_spacing_gives_no_match():
    p = PatternSpec(NEG3.steps, length=3, within=500)
    assert match_pattern(returns(-1, -1, -1), p) == []


def test_strict_and_relaxed_contiguity():
    evs = returns(-1, 1, -1, -1)
    assert match_pattern(evs, NEG3) == []
    relaxed = PatternSpec(NEG3.steps, 3, 10_000, contiguity="relaxed")
    assert [m.event_times for m in match_pattern(evs, relaxed)] == [(0, 2000, 3000)]


def test_pattern_rejects_unordered_events():
    with pytest.raises(ValueError):
        match_pattern([ev(2000, r=-1.0), ev(1000, r=-1.0)], NEG3)


@pytest.mark.parametrize("kwargs", [dict(length=0), dict(within=0), dict(contiguity="loose"),
                                    dict(steps=())])
def test_pattern_spec_validation(kwargs):
    base = dict(steps=NEG3.steps, length=3, within=1000)
    with pytest.raises(ValueError):
        PatternSpec(**{**base, **kwargs})


@given(st.lists(st.sampled_from([-1.0, 0.5]), max_size=30), st.integers(1, 5000))
def test_incremental_matcher_equals_batch_matcher(rs, within):
    p = PatternSpec(NEG3.steps, 3, within)
    evs = returns(*rs)
    m = PatternMatcher([p])
    inc = [x for e in evs for x in m.push(e)]
    assert sorted(inc, key=lambda x: x.event_times) == match_pattern(evs, p)


def test_pipeline_matches_patterns_on_window_values():
    spec = WindowSpec("tumbling", 1000)
    events = [ev(1000 * k + 5, "s", r=-0.1) for k in range(4)]
    out, _ = run_pipeline(events, PipelineConfig(spec, watermark_bound=0, patterns=(NEG3,)))
    assert [m.event_times for m in out.matches] == [(0, 1000, 2000), (1000, 2000, 3000)]


# ---------------------------------------------------------------------------
# stream/batch equivalence
# ---------------------------------------------------------------------------

class LastValueScorer:
    """Scores each fired window from order-independent aggregates."""

    def score(self, start, end, batch):
        top = max(a.fields["v"].max for a in batch.values() if "v" in a.fields)
        n = sum(a.count for a in batch.values())
        x = np.array([top, top - 0.1 * n, 1.0 - top, 0.5 * top])
        return str(end).zfill(12), 1.0 / (1.0 + np.exp(-8.0 * (x - 0.5))), n


def random_stream(seed, n, bound, window):
    """Events plus an arrival order displaced by at most ``bound`` in time."""
    rng = np.random.default_rng(seed)
    span = max(window * 20, n * 10)
    times = np.sort(rng.integers(0, span, n))
    keys = rng.choice(["k0", "k1", "k2", "k3", "k4"], n)
    vals = np.round(rng.random(n), 3)
    events = [StreamEvent.of(int(t), str(k), {"v": float(v)}) for t, k, v in zip(times, keys, vals)]
    jitter = rng.integers(0, bound + 1, n)
    arrival = np.lexsort((rng.random(n), times + jitter))
    return events, [events[i] for i in arrival]


def assert_aggregates_equal(stream_aggs, batch_aggs):
    assert [(r.key, r.start, r.end) for r in stream_aggs] == [(r.key, r.start, r.end) for r in batch_aggs]
    for s, b in zip(stream_aggs, batch_aggs):
        assert s.count == b.count and not s.late_update
        for name, fb in b.fields.items():
            fs = s.fields[name]
            assert (fs.count, fs.min, fs.max, fs.last) == (fb.count, fb.min, fb.max, fb.last)
            assert fs.sum == pytest.approx(fb.sum, rel=1e-12, abs=1e-9)
            assert fs.mean == pytest.approx(fb.mean, rel=1e-12, abs=1e-12)
            assert fs.variance == pytest.approx(fb.variance, rel=1e-9, abs=1e-12)


def alert_tuples(alerts):
    return [(a.timestamp, a.risk_type, a.posterior, a.severity, a.source_window) for a in alerts]


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 10_000), bound=st.integers(0, 3000),
       kind=st.sampled_from(["tumbling", "sliding"]), batch=st.sampled_from([1, 16, 1024]),
       workers=st.integers(2, 4))
@example(seed=1, n=10_000, bound=3000, kind="sliding", batch=16, workers=3)
def test_stream_equals_batch_on_bounded_permutations(seed, n, bound, kind, batch, workers):
    window = WindowSpec(kind, 1000, slide=400 if kind == "sliding" else None)
    events, arrival = random_stream(seed, n, bound, 1000)
    cost = CostSpec(cost_fp=1.0, cost_fn=2.0)
    cfg = PipelineConfig(window, watermark_bound=bound, micro_batch=batch)
    out, metrics = run_pipeline(arrival, cfg, LastValueScorer(), cost=cost)
    oracle = batch_pipeline(events, cfg, LastValueScorer(), cost=cost)
    assert_aggregates_equal(out.aggregates, oracle.aggregates)
    assert out.revisions == [] and metrics.dropped_late == 0
    # exactly-once primary emission
    wids = [(r.key, r.start, r.end) for r in out.aggregates]
    assert len(wids) == len(set(wids)) == len(batch_aggregate(events, window))
    assert alert_tuples(out.alerts) == alert_tuples(oracle.alerts)
    assert [a.timestamp for a in out.assessments] == [a.timestamp for a in oracle.assessments]
    # 1 worker vs N workers: identical outputs
    many, _ = run_pipeline(arrival, PipelineConfig(window, bound, n_workers=workers, micro_batch=batch),
                           LastValueScorer(), cost=cost)
    assert [r.to_json() for r in many.aggregates] == [r.to_json() for r in out.aggregates]
    assert alert_tuples(many.alerts) == alert_tuples(out.alerts)


@given(seed=st.integers(0, 2**32 - 1), lateness=st.integers(0, 4000))
def test_exactly_once_under_arbitrary_disorder(seed, lateness):
    """Any arrival order: every window fires once; revisions carry the batch result."""
    rng = np.random.default_rng(seed)
    spec = WindowSpec("tumbling", 1000, allowed_lateness=lateness)
    events = [StreamEvent.of(int(t), "k", {"v": float(v)})
              for t, v in zip(rng.integers(0, 20_000, 300), rng.integers(0, 100, 300))]
    arrival = [events[i] for i in rng.permutation(len(events))]
    out, metrics = run_pipeline(arrival, PipelineConfig(spec, watermark_bound=500, micro_batch=7))
    wids = [r.window for r in out.aggregates]
    assert len(wids) == len(set(wids))
    assert all(r.late_update and r.count > 0 for r in out.revisions)
    # the newest emission of each window accounts for every accepted event
    final = {r.window: r.count for r in out.aggregates + out.revisions}
    assert sum(final.values()) == metrics.events_accepted
    assert metrics.events_accepted + metrics.dropped_late + metrics.duplicates == 300


def test_multiple_sources_hold_the_watermark():
    spec = WindowSpec("tumbling", 1000)
    fast = [ev(t, "f", v=1.0) for t in range(0, 10_000, 100)]
    slow = [ev(t, "s", v=1.0) for t in range(0, 10_000, 1000)]
    out, metrics = run_pipeline([fast, slow], PipelineConfig(spec, watermark_bound=0, micro_batch=1))
    assert metrics.dropped_late == 0
    assert {(r.key, r.count) for r in out.aggregates} == {("f", 10), ("s", 1)}


def test_event_log_round_trip(tmp_path):
    events = [ev(5, "a", v=1.25, w=-3.0), ev(7, "b")]
    assert write_events(tmp_path / "e.jsonl", events) == 2
    assert read_events(tmp_path / "e.jsonl") == events


def test_event_log_reports_bad_line(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"event_time": 1, "key": "a"}\n{"event_time": "x"}\n')
    with pytest.raises(ValueError, match=":2:"):
        read_events(p)


def test_event_validation():
    with pytest.raises(TypeError):
        StreamEvent(1.5, "a")
    with pytest.raises(ValueError):
        StreamEvent(1, "")
    assert StreamEvent.of(1, "a", {"x": None, "y": float("nan"), "z": 2}).values == {"z": 2.0}


# ---------------------------------------------------------------------------
# replay of recorded days through the trained engine
# ---------------------------------------------------------------------------

def test_replayed_month_matches_batch_assessment(small_bundle, two_year_records):
    from riskwatch.scoring import DailyWindowScorer, batch_assess, load_bundle, records_to_events

    cost = CostSpec(cost_fp=0.001, cost_fn=1.0)
    engine = load_bundle(small_bundle, cost)
    december = two_year_records.slice_dates("2021-12-01", "2021-12-31")
    events = records_to_events(december)
    rng = np.random.default_rng(3)
    arrival = sorted((events[i] for i in rng.permutation(len(events))), key=lambda e: e.event_time)
    cfg = PipelineConfig(WindowSpec("tumbling", DAY_MS), watermark_bound=2000, n_workers=2)
    out, _ = run_pipeline(arrival, cfg, DailyWindowScorer(engine.clone()), engine.bayes, cost)

    batch = batch_assess(december, engine.clone())
    assert len(batch) == len(out.assessments) == 23
    tracker = AlertTracker(optimal_threshold(cost))
    expected = []
    for a, s in zip(batch, out.assessments):
        assert a.timestamp == s.timestamp
        np.testing.assert_array_equal(a.combined, s.scores)
        for r, rt in enumerate(RISK_TYPES):
            e = tracker.update(a.timestamp, rt, float(a.posterior[r]))
            if e is not None:
                expected.append((e.timestamp, e.risk_type, e.posterior))
    assert expected, "low false-positive cost should raise at least one alert"
    assert [(e.timestamp, e.risk_type, e.posterior) for e in out.alerts] == expected
