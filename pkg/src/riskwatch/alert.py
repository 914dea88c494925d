"""Bayesian alerting: posterior risk from bucketed model scores, cost-optimal thresholds."""
from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from .taxonomy import N_RISK_TYPES, RISK_TYPES, RiskType, parse_risk_type

logger = logging.getLogger(__name__)

N_BUCKETS = 10
HYSTERESIS = 0.05
WARNING_BAND = 0.15
CRITICAL_BAND = 0.35


class Severity(str, Enum):
    WATCH = "watch"
    WARNING = "warning"
    CRITICAL = "critical"


class InconsistentProbabilities(ValueError):
    pass


def posterior(prior: float, likelihood: float, evidence: float) -> float:
    """P(A|B) = P(B|A) P(A) / P(B); raises instead of clamping a result above 1."""
    for name, v in (("prior", prior), ("likelihood", likelihood), ("evidence", evidence)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    if evidence == 0:
        raise ValueError("evidence must be positive")
    p = likelihood * prior / evidence
    if p > 1.0:
        raise InconsistentProbabilities(
            f"posterior {p} > 1 from likelihood {likelihood}, prior {prior}, evidence {evidence}")
    return p


@dataclass(frozen=True)
class CostSpec:
    cost_fp: float = 1.0
    cost_fn: float = 1.0

    def __post_init__(self):
        if self.cost_fp < 0 or self.cost_fn < 0:
            raise ValueError("costs must be non-negative")
        if self.cost_fp == 0 and self.cost_fn == 0:
            raise ValueError("cost_fp and cost_fn cannot both be zero")


def optimal_threshold(cost: CostSpec) -> float:
    """Alert iff P(A|B) >= c_fp / (c_fp + c_fn)."""
    return cost.cost_fp / (cost.cost_fp + cost.cost_fn)


def bucket_of(scores, n_buckets: int = N_BUCKETS) -> np.ndarray:
    s = np.clip(np.asarray(scores, dtype=np.float64), 0.0, 1.0)
    return np.minimum((s * n_buckets).astype(np.int64), n_buckets - 1)


@dataclass
class BayesModel:
    prior: np.ndarray       # (R,)  P(A)
    likelihood: np.ndarray  # (R, B) P(B=b | A)
    evidence: np.ndarray    # (R, B) P(B=b)

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.likelihood = np.asarray(self.likelihood, dtype=np.float64)
        self.evidence = np.asarray(self.evidence, dtype=np.float64)
        if self.likelihood.shape != self.evidence.shape or self.likelihood.shape[0] != self.prior.shape[0]:
            raise ValueError("prior, likelihood and evidence shapes disagree")
        for a in (self.prior, self.likelihood, self.evidence):
            if not ((a >= 0) & (a <= 1)).all():
                raise ValueError("probabilities must lie in [0, 1]")
        if (self.likelihood * self.prior[:, None] > self.evidence * (1 + 1e-12)).any():
            raise InconsistentProbabilities("P(B) < P(B|A) P(A) for some bucket")

    @property
    def n_buckets(self) -> int:
        return self.likelihood.shape[1]

    def bucket_posteriors(self) -> np.ndarray:
        """(R, B) posterior for every risk type and bucket."""
        return self.likelihood * self.prior[:, None] / self.evidence

    def posterior_for(self, risk_type, score: float) -> float:
        r = RISK_TYPES.index(RiskType(risk_type))
        b = int(bucket_of(score, self.n_buckets))
        return posterior(self.prior[r], self.likelihood[r, b], self.evidence[r, b])

    def posteriors(self, scores) -> np.ndarray:
        """Posterior per risk type for a (R,) or (N, R) score array."""
        s = np.asarray(scores, dtype=np.float64)
        b = bucket_of(s, self.n_buckets)
        table = self.bucket_posteriors()
        return table[np.arange(self.prior.shape[0]), b]

    def to_json(self) -> dict:
        return {"format": "riskwatch.bayes", "version": 1,
                "risk_types": [r.value for r in RISK_TYPES][: self.prior.shape[0]],
                "prior": self.prior.tolist(), "likelihood": self.likelihood.tolist(),
                "evidence": self.evidence.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "BayesModel":
        if doc.get("format") != "riskwatch.bayes":
            raise ValueError("not a calibration document")
        return cls(np.array(doc["prior"]), np.array(doc["likelihood"]), np.array(doc["evidence"]))


def calibrate(scores, labels, n_buckets: int = N_BUCKETS) -> BayesModel:
    """Estimate P(A), P(B|A), P(B) per risk type from historical scores.

    B is the equal-width bucket of the score. Both conditionals get +1
    Laplace smoothing per bucket: P(B|A) = (n_pos_b + 1) / (n_pos + K) and
    P(B) = (n_b + 1) / (n + K). This keeps every posterior at or below 1.
    """
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if S.ndim == 1:
        S, Y = S[:, None], Y.reshape(-1, 1)
    if S.shape != Y.shape or S.shape[0] == 0:
        raise ValueError("scores and labels must be equal-shaped and non-empty")
    n, R = S.shape
    K = n_buckets
    prior = np.empty(R)
    like = np.empty((R, K))
    evid = np.empty((R, K))
    for r in range(R):
        y = Y[:, r].astype(bool)
        n_pos = int(y.sum())
        if n_pos == 0 or n_pos == n:
            # prior 0 (or 1) makes every bucket posterior 0 (or 1); still consistent
            name = RISK_TYPES[r].value if R == N_RISK_TYPES else str(r)
            logger.warning("calibration history for %s has a single class", name)
        b = bucket_of(S[:, r], K)
        n_b = np.bincount(b, minlength=K)
        n_pos_b = np.bincount(b[y], minlength=K)
        prior[r] = n_pos / n
        like[r] = (n_pos_b + 1) / (n_pos + K)
        evid[r] = (n_b + 1) / (n + K)
    return BayesModel(prior, like, evid)


def expected_cost(model: BayesModel, counts: np.ndarray, threshold: float, cost: CostSpec,
                  risk_index: int = 0) -> float:
    """Cost of alerting on buckets with posterior >= threshold, using bucket
    posteriors as the event probability and ``counts`` as bucket weights."""
    q = model.bucket_posteriors()[risk_index]
    alert = q >= threshold
    per = np.where(alert, cost.cost_fp * (1.0 - q), cost.cost_fn * q)
    return float(np.sum(np.asarray(counts) * per))


# ---------------------------------------------------------------------------
# alert emission
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlertEvent:
    timestamp: str
    risk_type: RiskType
    posterior: float
    severity: Severity
    source_window: str

    def to_json(self) -> dict:
        return {"timestamp": self.timestamp, "risk_type": self.risk_type.value,
                "posterior": self.posterior, "severity": self.severity.value,
                "source_window": self.source_window}

    @classmethod
    def from_json(cls, obj: dict) -> "AlertEvent":
        return cls(str(obj["timestamp"]), parse_risk_type(obj["risk_type"]), float(obj["posterior"]),
                   Severity(obj["severity"]), str(obj["source_window"]))


def severity_for(p: float, threshold: float) -> Severity:
    excess = min(p, 1.0) - threshold
    if excess >= CRITICAL_BAND:
        return Severity.CRITICAL
    if excess >= WARNING_BAND:
        return Severity.WARNING
    return Severity.WATCH


class AlertTracker:
    """Per-risk-type hysteresis state: fire on reaching the threshold, re-arm
    only after the posterior drops below threshold - 0.05."""

    def __init__(self, threshold: float, margin: float = HYSTERESIS):
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        self.threshold = threshold
        self.margin = margin
        self._armed: dict[RiskType, bool] = {}
        self._last_ts: str | None = None

    def update(self, timestamp: str, risk_type: RiskType, p: float, source: str = "") -> AlertEvent | None:
        ts = str(timestamp)
        if self._last_ts is not None and ts < self._last_ts:
            raise ValueError(f"timestamp {ts} precedes {self._last_ts}")
        self._last_ts = ts
        armed = self._armed.get(risk_type, True)
        event = None
        if armed and p >= self.threshold:
            event = AlertEvent(ts, risk_type, float(p), severity_for(p, self.threshold), source)
            armed = False
        elif not armed and p < self.threshold - self.margin:
            armed = True
        self._armed[risk_type] = armed
        return event

    def state(self) -> dict:
        return {"threshold": self.threshold, "armed": {k.value: v for k, v in self._armed.items()},
                "last_timestamp": self._last_ts}


def emit_from_posteriors(timestamps, posteriors, threshold: float, risk_type=RiskType.MARKET_CRASH,
                         sources=None) -> list[AlertEvent]:
    tracker = AlertTracker(threshold)
    rt = RiskType(risk_type)
    out = []
    for k, (ts, p) in enumerate(zip(timestamps, posteriors)):
        ev = tracker.update(str(ts), rt, float(p), sources[k] if sources is not None else str(k))
        if ev is not None:
            out.append(ev)
    return out


def emit_alerts(score_stream: Iterable, model: BayesModel, cost: CostSpec) -> list[AlertEvent]:
    """Alerts for a stream of ``(timestamp, scores[R])`` or ``(timestamp, scores, source)`` items."""
    tracker = AlertTracker(optimal_threshold(cost))
    out = []
    for item in score_stream:
        ts, scores = item[0], item[1]
        source = item[2] if len(item) > 2 else str(ts)
        post = model.posteriors(np.asarray(scores, dtype=np.float64))
        for r, rt in enumerate(RISK_TYPES[: len(post)]):
            ev = tracker.update(str(ts), rt, float(post[r]), source)
            if ev is not None:
                out.append(ev)
    return out


class AlertLog:
    """Append-only JSON-lines alert log."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, events: Iterable[AlertEvent], fsync: bool = True) -> int:
        lines = [json.dumps(e.to_json()) + "\n" for e in events]
        if not lines:
            return 0
        with self._lock, open(self.path, "a") as fh:
            fh.writelines(lines)
            fh.flush()
            if fsync:
                os.fsync(fh.fileno())
        return len(lines)

    def read(self) -> list[AlertEvent]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path) as fh:
            for line in fh:
                if line.strip():
                    out.append(AlertEvent.from_json(json.loads(line)))
        return out
