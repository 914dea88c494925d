from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskwatch.evaluation import (
    BacktestSpec, ConfusionCounts, InsufficientSpanError, backtest_report, backtest_windows,
    classify_metrics, holdout_split, kfold_tune, metrics_from_counts, roc_auc, rolling_backtest,
    window_indices, write_roc_csv,
)
from riskwatch.preprocess import SampleSet
from riskwatch.taxonomy import N_RISK_TYPES, RiskType

from oracles import mann_whitney_auc, rolling_window_count


def daily_samples(n, seed=0, features=2, signal_feature=0) -> SampleSet:
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3, features))
    y = np.zeros((n, N_RISK_TYPES), np.uint8)
    y[:, :] = (X[:, -1, signal_feature] + rng.normal(0, 0.5, n) > 0)[:, None]
    anchors = np.datetime64("2020-01-01") + np.arange(n)
    return SampleSet(X, y, anchors, anchors + 10, tuple(f"f{k}" for k in range(features)), 3, 10)


class FeatureScorer:
    """Scores every risk type by the sigmoid of one input feature."""

    def __init__(self, feature=0):
        self.feature = feature
        self.fitted_on = None

    def fit(self, samples):
        self.fitted_on = samples
        return self

    def predict_proba(self, samples):
        p = 1 / (1 + np.exp(-samples.last_rows()[:, self.feature]))
        return np.repeat(p[:, None], N_RISK_TYPES, axis=1)


# -- classify_metrics ---------------------------------------------------------

def test_confusion_example():
    m = metrics_from_counts(ConfusionCounts(tp=3, fp=1, fn=1, tn=5))
    assert (m.accuracy, m.precision, m.recall, m.f1) == pytest.approx((0.8, 0.75, 0.75, 0.75))


def test_confusion_example_from_scores():
    scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.1, 0.2, 0.3, 0.1, 0.0]
    labels = [1, 1, 1, 0, 1, 0, 0, 0, 0, 0]
    m = classify_metrics(scores, labels, 0.5)
    assert m.counts == ConfusionCounts(3, 1, 1, 5)


def test_all_correct():
    m = classify_metrics([0.9, 0.1, 0.7], [1, 0, 1])
    assert m.accuracy == 1.0 and m.f1 == 1.0


def test_degenerate_denominators_flagged():
    m = classify_metrics([0.1, 0.2], [0, 0])
    assert m.precision == 0.0 and not m.precision_defined
    assert m.recall == 0.0 and not m.recall_defined


def test_length_mismatch():
    with pytest.raises(ValueError):
        classify_metrics([0.1, 0.2], [0])


@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=60), st.floats(0, 1))
def test_metric_identities(pairs, threshold):
    s, y = zip(*pairs)
    m = classify_metrics(s, y, threshold)
    c = m.counts
    assert c.total == len(pairs)
    assert m.accuracy == pytest.approx((c.tp + c.tn) / c.total)
    if m.precision_defined and m.recall_defined and m.precision + m.recall > 0:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))


# -- roc_auc ------------------------------------------------------------------

def test_auc_perfect():
    assert roc_auc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]).auc == 1.0


def test_auc_three_of_four_pairs():
    scores, labels = [0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]
    assert roc_auc(scores, labels).auc == 0.75 == mann_whitney_auc(scores, labels)


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


def test_shuffled_labels_near_half():
    rng = np.random.default_rng(20240101)
    scores = rng.random(10_000)
    labels = rng.permutation(np.r_[np.ones(5000), np.zeros(5000)])
    assert 0.45 <= roc_auc(scores, labels).auc <= 0.55


def auc_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    # coarse scores so ties are common
    scores = rng.integers(0, int(rng.integers(2, 30)), n) / 10
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    return scores, labels


@pytest.mark.parametrize("seed", range(100))
def test_trapezoid_equals_mann_whitney(seed):
    scores, labels = auc_instance(seed)
    assert abs(roc_auc(scores, labels).auc - mann_whitney_auc(scores, labels)) <= 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32))
def test_auc_invariant_under_monotone_transform(seed):
    scores, labels = auc_instance(seed)
    base = roc_auc(scores, labels).auc
    assert roc_auc(np.exp(3 * scores) - 7, labels).auc == base
    assert roc_auc(scores ** 3, labels).auc == base


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32))
def test_roc_curve_shape(seed):
    scores, labels = auc_instance(seed)
    roc = roc_auc(scores, labels)
    assert tuple(roc.points[0]) == (0.0, 0.0) and tuple(roc.points[-1]) == (1.0, 1.0)
    assert (np.diff(roc.fpr) >= 0).all() and (np.diff(roc.tpr) >= 0).all()
    assert len(roc.points) == len(np.unique(scores)) + 1
    assert 0.0 <= roc.auc <= 1.0


# -- backtest windows ---------------------------------------------------------

def test_window_example():
    ws = backtest_windows(100, 40, 30, 30)
    assert [(w.test_start, w.test_end) for w in ws] == [(40, 70), (70, 100)]
    assert [(w.train_start, w.train_end) for w in ws] == [(0, 40), (30, 70)]


def test_expanding_windows_start_at_zero():
    ws = backtest_windows(100, 40, 30, 30, "expanding")
    assert [(w.train_start, w.train_end) for w in ws] == [(0, 40), (0, 70)]


def test_step_equal_to_remaining_is_one_window():
    assert len(backtest_windows(100, 40, 30, 60)) == 1


def test_short_span_raises():
    with pytest.raises(InsufficientSpanError):
        backtest_windows(60, 40, 30, 30)


@pytest.mark.parametrize("seed", range(50))
def test_window_count_closed_form(seed):
    rng = np.random.default_rng(seed)
    train, horizon, step = (int(v) for v in rng.integers(1, 200, 3))
    span = int(rng.integers(train + horizon, train + horizon + 2000))
    ws = backtest_windows(span, train, horizon, step)
    assert len(ws) == rolling_window_count(span, train, horizon, step)
    for k, w in enumerate(ws):
        assert w.test_start == train + k * step and w.test_end == w.test_start + horizon
        assert w.train_end == w.test_start and w.train_end - w.train_start == train
        assert w.test_end <= span


@settings(max_examples=30)
@given(n=st.integers(60, 200), train=st.integers(10, 50), horizon=st.integers(1, 20),
       step=st.integers(1, 20), expanding=st.booleans())
def test_no_label_window_overlap(n, train, horizon, step, expanding):
    samples = daily_samples(n)
    spec = BacktestSpec(train, horizon, step, "expanding" if expanding else "sliding")
    try:
        parts = window_indices(samples, spec)
    except InsufficientSpanError:
        return
    for _, tr, te in parts:
        assert samples.horizon_end[tr].max() < samples.anchor_timestamps[te].min()
        assert samples.anchor_timestamps[tr].max() < samples.anchor_timestamps[te].min()


def test_rolling_backtest_runs_and_pools():
    samples = daily_samples(100)
    res = rolling_backtest({"a": FeatureScorer, "b": lambda: FeatureScorer(1)}, samples,
                           BacktestSpec(40, 30, 30))
    assert [r.window.index for r in res.windows] == [0, 1]
    assert res.scores["a"].shape == (60, N_RISK_TYPES)
    pooled = res.pooled_auc("a", RiskType.MARKET_CRASH)
    assert pooled == pytest.approx(roc_auc(res.scores["a"][:, 0], res.labels[:, 0]).auc)
    assert pooled > res.pooled_auc("b", RiskType.MARKET_CRASH)
    report = backtest_report(res, BacktestSpec(40, 30, 30))
    json.dumps(report)
    assert len(report["meta"]["windows"]) == 2


def test_roc_csv_export(tmp_path):
    samples = daily_samples(100)
    res = rolling_backtest(FeatureScorer, samples, BacktestSpec(40, 30, 30))
    n = write_roc_csv(tmp_path / "roc.csv", backtest_report(res, BacktestSpec(40, 30, 30)))
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "model,risk_type,fpr,tpr" and len(lines) == n + 1


def test_holdout_split_purges():
    samples = daily_samples(100)
    train, test = holdout_split(samples, 0.8)
    assert test[0] == 80 and test[-1] == 99
    assert samples.horizon_end[train].max() < samples.anchor_timestamps[test[0]]


# -- kfold_tune ---------------------------------------------------------------

def test_one_cell_grid():
    r = kfold_tune(lambda c: FeatureScorer(**c), daily_samples(60), [{"feature": 1}])
    assert r.best == {"feature": 1} and r.best_index == 0


def test_duplicate_cells_first_wins():
    r = kfold_tune(lambda c: FeatureScorer(**c), daily_samples(60), [{"feature": 0}, {"feature": 0}])
    assert r.best_index == 0 and r.cell_scores[0] == r.cell_scores[1]


def test_true_generator_cell_selected():
    # labels planted on feature 1 (seed 3); the scorer reading feature 1 must win
    samples = daily_samples(200, seed=3, signal_feature=1)
    r = kfold_tune(lambda c: FeatureScorer(**c), samples, [{"feature": 0}, {"feature": 1}])
    assert r.best == {"feature": 1}
    assert r.cell_scores[1] > 0.7 > r.cell_scores[0]


def test_tune_errors():
    with pytest.raises(ValueError):
        kfold_tune(lambda c: FeatureScorer(), daily_samples(20), [])
    with pytest.raises(ValueError):
        kfold_tune(lambda c: FeatureScorer(), daily_samples(3), [{}], k=5)
    with pytest.raises(ValueError):
        kfold_tune(lambda c: FeatureScorer(), daily_samples(20), [{}], k=1)
