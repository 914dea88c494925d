"""Classification metrics, ROC/AUC, rolling backtests and time-ordered tuning."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .taxonomy import RISK_TYPES, RiskType

logger = logging.getLogger(__name__)

MODEL_NAMES = ("lstm", "random_forest", "gradient_boosting")
MODEL_ALIASES = {"rf": "random_forest", "gbt": "gradient_boosting", "lstm": "lstm",
                 "random_forest": "random_forest", "gradient_boosting": "gradient_boosting"}


# ---------------------------------------------------------------------------
# point metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassifyMetrics:
    counts: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    f1: float
    # False when the denominator was zero and the value was set to 0 by convention
    precision_defined: bool = True
    recall_defined: bool = True

    def to_json(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d


def metrics_from_counts(c: ConfusionCounts) -> ClassifyMetrics:
    if c.total == 0:
        raise ValueError("no samples to evaluate")
    p_def = (c.tp + c.fp) > 0
    r_def = (c.tp + c.fn) > 0
    precision = c.tp / (c.tp + c.fp) if p_def else 0.0
    recall = c.tp / (c.tp + c.fn) if r_def else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassifyMetrics(c, (c.tp + c.tn) / c.total, precision, recall, f1, p_def, r_def)


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ValueError("need at least one sample")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def classify_metrics(scores, labels, threshold: float = 0.5) -> ClassifyMetrics:
    """Metrics for the decision ``score >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    s, y = _scores_labels(scores, labels)
    pred = s >= threshold
    return metrics_from_counts(ConfusionCounts(int(np.sum(pred & y)), int(np.sum(pred & ~y)),
                                               int(np.sum(~pred & y)), int(np.sum(~pred & ~y))))


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    points: np.ndarray      # (k, 2) columns fpr, tpr; starts (0,0), ends (1,1)
    thresholds: np.ndarray  # score at each point after the origin
    auc: float

    @property
    def fpr(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def tpr(self) -> np.ndarray:
        return self.points[:, 1]


def roc_auc(scores, labels) -> RocCurve:
    """ROC over distinct descending scores, AUC by the trapezoid rule."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    # exact integer-based trapezoid: sum (fp_i - fp_{i-1}) (tp_i + tp_{i-1}) / 2
    fp0 = np.r_[0, fp]
    tp0 = np.r_[0, tp]
    area2 = float(np.sum(np.diff(fp0) * (tp0[1:] + tp0[:-1])))
    auc = area2 / (2.0 * n_pos * n_neg)
    return RocCurve(np.column_stack([fpr, tpr]), s_sorted[ends], auc)


# ---------------------------------------------------------------------------
# rolling backtest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BacktestSpec:
    """Durations are calendar days."""
    initial_train: int = 1826
    horizon: int = 30
    step: int = 30
    mode: str = "sliding"

    def __post_init__(self):
        if min(self.initial_train, self.horizon, self.step) <= 0:
            raise ValueError("backtest durations must be positive")
        if self.mode not in ("sliding", "expanding"):
            raise ValueError(f"mode must be 'sliding' or 'expanding', got {self.mode!r}")


@dataclass(frozen=True)
class Window:
    index: int
    train_start: int
    train_end: int   # exclusive
    test_start: int
    test_end: int    # exclusive


class InsufficientSpanError(ValueError):
    pass


def backtest_windows(span: int, train: int, horizon: int, step: int, mode: str = "sliding") -> list[Window]:
    """Walk-forward windows over ``[0, span)``.

    There are ``(span - train - horizon) // step + 1`` windows; window k
    tests on ``[train + k*step, train + k*step + horizon)``.
    """
    if min(train, horizon, step) <= 0:
        raise ValueError("durations must be positive")
    if span < train + horizon:
        raise InsufficientSpanError(f"span {span} is shorter than train {train} + horizon {horizon}")
    n = (span - train - horizon) // step + 1
    out = []
    for k in range(n):
        test_start = train + k * step
        train_start = k * step if mode == "sliding" else 0
        out.append(Window(k, train_start, test_start, test_start, test_start + horizon))
    return out


@dataclass
class WindowResult:
    window: Window
    n_train: int
    n_test: int
    metrics: dict[str, dict[str, dict]]   # model -> risk type -> metrics json


@dataclass
class BacktestResult:
    windows: list[WindowResult]
    scores: dict[str, np.ndarray]           # model -> (N_test_total, R)
    labels: np.ndarray                      # (N_test_total, R)
    anchors: np.ndarray
    window_of: np.ndarray
    pooled: dict[str, dict[str, dict]] = field(default_factory=dict)

    def pooled_auc(self, model: str, risk_type: RiskType) -> float | None:
        return self.pooled[model][RiskType(risk_type).value].get("auc")


def _days(ts) -> np.ndarray:
    return np.asarray(ts, dtype="datetime64[D]").astype(np.int64)


def window_indices(samples, spec: BacktestSpec) -> list[tuple[Window, np.ndarray, np.ndarray]]:
    """(window, train indices, test indices) with label-overlap purging."""
    if len(samples) == 0:
        raise ValueError("empty sample set")
    anchor = _days(samples.anchor_timestamps)
    label_end = _days(samples.horizon_end)
    t0 = int(anchor[0])
    span = int(anchor[-1]) - t0 + 1
    out = []
    for w in backtest_windows(span, spec.initial_train, spec.horizon, spec.step, spec.mode):
        rel = anchor - t0
        test = np.flatnonzero((rel >= w.test_start) & (rel < w.test_end))
        # drop training samples whose label window reaches into the test period
        train = np.flatnonzero((rel >= w.train_start) & (rel < w.train_end)
                               & (label_end - t0 < w.test_start))
        if test.size == 0:
            continue
        if train.size == 0:
            raise InsufficientSpanError(f"window {w.index} has no training samples after purging")
        out.append((w, train, test))
    return out


def _metrics_block(scores, labels, threshold=0.5) -> dict[str, dict]:
    out = {}
    for j, rt in enumerate(RISK_TYPES):
        m = classify_metrics(scores[:, j], labels[:, j], threshold).to_json()
        y = labels[:, j]
        if 0 < y.sum() < y.size:
            roc = roc_auc(scores[:, j], y)
            m["auc"] = roc.auc
            m["roc"] = roc.points.tolist()
        else:
            m["auc"] = None
            m["roc"] = None
        out[rt.value] = m
    return out


def rolling_backtest(model_factories: dict[str, Callable[[], object]] | Callable[[], object],
                     samples, spec: BacktestSpec | None = None, threshold: float = 0.5) -> BacktestResult:
    """Walk-forward evaluation; each window refits every model from scratch.

    ``model_factories`` maps a model name to a zero-argument callable that
    returns an object with ``fit(SampleSet)`` and ``predict_proba(SampleSet)``.
    """
    spec = spec or BacktestSpec()
    if callable(model_factories):
        model_factories = {"model": model_factories}
    results = []
    parts = {name: [] for name in model_factories}
    label_parts, anchor_parts, win_parts = [], [], []
    for w, train, test in window_indices(samples, spec):
        tr, te = samples.subset(train), samples.subset(test)
        per_model = {}
        for name, factory in model_factories.items():
            model = factory()
            model.fit(tr)
            scores = np.asarray(model.predict_proba(te), dtype=np.float64)
            parts[name].append(scores)
            per_model[name] = _metrics_block(scores, te.labels)
        label_parts.append(te.labels)
        anchor_parts.append(te.anchor_timestamps)
        win_parts.append(np.full(len(te), w.index))
        results.append(WindowResult(w, len(tr), len(te), per_model))
        logger.info("window %d: train %d test %d", w.index, len(tr), len(te))
    labels = np.concatenate(label_parts)
    res = BacktestResult(results, {k: np.concatenate(v) for k, v in parts.items()}, labels,
                         np.concatenate(anchor_parts), np.concatenate(win_parts))
    res.pooled = {name: _metrics_block(s, labels, threshold) for name, s in res.scores.items()}
    return res


def holdout_split(samples, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Chronological split: newest (1 - fraction) samples test, older ones train.

    Training samples whose label window reaches the first test anchor are
    purged, as in the rolling backtest.
    """
    n = len(samples)
    k = int(round(train_fraction * n))
    if not 0 < k < n:
        raise ValueError(f"train_fraction {train_fraction} leaves an empty side of {n} samples")
    test = np.arange(k, n)
    first = samples.anchor_timestamps[k]
    train = np.flatnonzero((np.arange(n) < k) & (samples.horizon_end < first))
    if train.size == 0:
        raise InsufficientSpanError("no training samples remain after purging")
    return train, test


def holdout_evaluate(models: dict[str, object], test, threshold: float = 0.5) -> dict[str, dict[str, dict]]:
    """Metrics blocks for already-fitted models on one test set."""
    return {name: _metrics_block(np.asarray(m.predict_proba(test)), test.labels, threshold)
            for name, m in models.items()}


# ---------------------------------------------------------------------------
# tuning
# ---------------------------------------------------------------------------

@dataclass
class TuneResult:
    best: dict
    best_index: int
    cell_scores: list[float]


def contiguous_folds(n: int, k: int) -> list[np.ndarray]:
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least {k} samples for {k} folds, got {n}")
    return np.array_split(np.arange(n), k)


def kfold_tune(model_factory: Callable[[dict], object], samples, grid: Sequence[dict], k: int = 5) -> TuneResult:
    """Pick the grid cell with the best mean validation AUC over time-ordered folds.

    Training rows whose label window overlaps the validation fold, or whose
    inputs start inside it, are purged. Ties go to the earlier cell.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("grid is empty")
    folds = contiguous_folds(len(samples), k)
    anchor = _days(samples.anchor_timestamps)
    label_end = _days(samples.horizon_end)
    scores = []
    for cell in grid:
        fold_scores = []
        for fold in folds:
            v_lo = anchor[fold[0]]
            v_label_hi = label_end[fold].max()
            before = (anchor < v_lo) & (label_end < v_lo)
            after = anchor > v_label_hi
            train = np.flatnonzero(before | after)
            if train.size == 0:
                continue
            val = samples.subset(fold)
            model = model_factory(cell)
            model.fit(samples.subset(train))
            P = np.asarray(model.predict_proba(val))
            aucs = [roc_auc(P[:, j], val.labels[:, j]).auc
                    for j in range(val.labels.shape[1]) if 0 < val.labels[:, j].sum() < len(val)]
            if aucs:
                fold_scores.append(float(np.mean(aucs)))
        scores.append(float(np.mean(fold_scores)) if fold_scores else -math.inf)
    best_index = int(np.argmax(scores))   # argmax returns the first maximum
    return TuneResult(dict(grid[best_index]), best_index, scores)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def metrics_report(blocks: dict[str, dict[str, dict]], meta: dict | None = None) -> dict:
    return {"format": "riskwatch.metrics", "version": 1, "meta": meta or {}, "models": blocks}


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2))


def write_roc_csv(path, report: dict) -> int:
    """One row per ROC point: model, risk_type, fpr, tpr. Returns rows written."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "risk_type", "fpr", "tpr"])
        for model, per_rt in report["models"].items():
            for rt, m in per_rt.items():
                for fpr, tpr in m.get("roc") or []:
                    w.writerow([model, rt, repr(fpr), repr(tpr)])
                    n += 1
    return n


def backtest_report(result: BacktestResult, spec: BacktestSpec) -> dict:
    per_window = [{"window": asdict(r.window), "n_train": r.n_train, "n_test": r.n_test,
                   "auc": {m: {rt: b["auc"] for rt, b in blk.items()} for m, blk in r.metrics.items()}}
                  for r in result.windows]
    return metrics_report(result.pooled, {"backtest": asdict(spec), "windows": per_window})
