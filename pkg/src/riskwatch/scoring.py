"""Live risk scoring shared by the batch, stream and service paths.

``RiskEngine`` keeps a trailing buffer of forward-filled raw daily rows and
re-derives the model inputs causally from it: features, outlier cleaning
with the training robust scale, gap filling, normalisation. Every path
pushes the same raw rows through the same code, so stream replay and batch
recomputation agree exactly.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import lstm as lstm_mod
from . import trees as trees_mod
from .alert import BayesModel, CostSpec
from .datagen import DAILY_KINDS, Kind, Record, RecordSet
from .evaluation import MODEL_NAMES
from .preprocess import (ROLLING_WINDOW, FeatureMatrix, NormalizationParams, PreparedData,
                         RobustScale, apply_normalizer, clean_outliers, features_from_raw,
                         forward_fill, pivot_records, raw_column)
from .stream import DAY_MS, AggregateResult, StreamEvent
from .taxonomy import RISK_TYPES

logger = logging.getLogger(__name__)

# records carry a date only; stamp them at a nominal 16:00 UTC close
CLOSE_OFFSET_MS = 16 * 3_600_000
EPOCH = np.datetime64("1970-01-01", "D")


def day_to_ms(day) -> int:
    return int((np.datetime64(day, "D") - EPOCH).astype(np.int64)) * DAY_MS


def ms_to_day(ms: int) -> np.datetime64:
    return EPOCH + np.timedelta64(int(ms // DAY_MS), "D")


def record_key(kind: Kind, instrument: str) -> str:
    return f"{kind.value}:{instrument}"


def record_to_event(r: Record) -> StreamEvent:
    return StreamEvent.of(day_to_ms(r.timestamp) + CLOSE_OFFSET_MS, record_key(r.kind, r.instrument),
                          {k: v for k, v in r.fields.items() if v is not None})


def records_to_events(records: Iterable[Record]) -> list[StreamEvent]:
    """Events in (event_time, key) order, as a feed would deliver a day's closes."""
    return sorted((record_to_event(r) for r in records), key=lambda e: (e.event_time, e.key))


@dataclass
class PreprocessState:
    """Everything fitted on training data that live scoring needs."""
    raw_columns: tuple[str, ...]
    raw_fill: np.ndarray             # per raw column, used before a column is ever observed
    robust: RobustScale
    normalizer: NormalizationParams
    feature_fill: np.ndarray         # train medians of cleaned features
    lookback: int
    z_threshold: float
    window: int = ROLLING_WINDOW

    @property
    def buffer_len(self) -> int:
        return self.lookback + self.window + 1

    def to_json(self) -> dict:
        return {"raw_columns": list(self.raw_columns), "raw_fill": self.raw_fill.tolist(),
                "robust_center": self.robust.center.tolist(), "robust_scale": self.robust.scale.tolist(),
                "normalizer": self.normalizer.to_json(), "feature_fill": self.feature_fill.tolist(),
                "lookback": self.lookback, "z_threshold": self.z_threshold, "window": self.window}

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessState":
        return cls(tuple(d["raw_columns"]), np.array(d["raw_fill"], dtype=float),
                   RobustScale(np.array(d["robust_center"]), np.array(d["robust_scale"])),
                   NormalizationParams.from_json(d["normalizer"]), np.array(d["feature_fill"]),
                   int(d["lookback"]), float(d["z_threshold"]), int(d.get("window", ROLLING_WINDOW)))


def preprocess_state(prepared: PreparedData, records: RecordSet, z_threshold: float = 8.0) -> PreprocessState:
    raw, _ = pivot_records(records, prepared.raw_columns)
    n_train = prepared.train_rows
    with np.errstate(all="ignore"):
        raw_fill = np.nanmedian(raw.values[:n_train], axis=0)
    raw_fill = np.where(np.isnan(raw_fill), 0.0, raw_fill)
    # medians of the normalised training features mapped back to the cleaned scale
    norm = prepared.normalizer
    feats = prepared.features.values[:n_train] * np.where(norm.constant, 0.0, norm.std) + norm.mean
    return PreprocessState(prepared.raw_columns, raw_fill, prepared.robust, norm,
                           np.median(feats, axis=0), prepared.samples.lookback, z_threshold)


@dataclass
class RiskAssessment:
    timestamp: str
    scores: dict[str, np.ndarray]    # model -> (R,)
    combined: np.ndarray
    posterior: np.ndarray | None = None
    model_versions: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        rts = [r.value for r in RISK_TYPES]
        out = {"timestamp": self.timestamp,
               "scores": {m: dict(zip(rts, map(float, s))) for m, s in self.scores.items()},
               "combined": dict(zip(rts, map(float, self.combined))),
               "model_versions": dict(self.model_versions)}
        if self.posterior is not None:
            out["posterior"] = dict(zip(rts, map(float, self.posterior)))
        return out


class RiskEngine:
    def __init__(self, state: PreprocessState, models: dict[str, object],
                 bayes: BayesModel | None = None, cost: CostSpec | None = None,
                 versions: dict[str, str] | None = None):
        p = len(state.normalizer.feature_names)
        for name, m in models.items():
            width = _model_width(m)
            if width is not None and width != p:
                raise ValueError(f"model {name} expects {width} features, preprocessing yields {p}")
        self.state = state
        self.models = models
        self.bayes = bayes
        self.cost = cost or CostSpec()
        self.versions = versions or {}
        self._col = {c: j for j, c in enumerate(state.raw_columns)}
        self.reset()

    def reset(self) -> None:
        self._days: list[np.datetime64] = []
        self._rows: list[np.ndarray] = []
        self._last = np.full(len(self.state.raw_columns), np.nan)

    def clone(self) -> "RiskEngine":
        eng = RiskEngine(self.state, self.models, self.bayes, self.cost, self.versions)
        eng._days = list(self._days)
        eng._rows = [r.copy() for r in self._rows]
        eng._last = self._last.copy()
        return eng

    @property
    def days(self) -> list[np.datetime64]:
        return list(self._days)

    def push_row(self, day, raw_row) -> None:
        row = np.asarray(raw_row, dtype=np.float64)
        if row.shape != self._last.shape:
            raise ValueError(f"raw row has {row.size} columns, expected {self._last.size}")
        day = np.datetime64(day, "D")
        if self._days and day <= self._days[-1]:
            raise ValueError(f"day {day} does not follow {self._days[-1]}")
        row = np.where(np.isnan(row), self._last, row)
        self._last = row
        self._days.append(day)
        self._rows.append(row)
        if len(self._rows) > self.state.buffer_len:
            self._rows.pop(0)
            self._days.pop(0)

    def row_from_values(self, values: dict[str, float]) -> np.ndarray:
        """Raw row from ``{raw column: value}``; unknown columns are ignored."""
        row = np.full(len(self.state.raw_columns), np.nan)
        for name, v in values.items():
            j = self._col.get(name)
            if j is not None:
                row[j] = v
        return row

    def model_inputs(self) -> np.ndarray | None:
        """(lookback, p) normalised window ending at the newest row, or None if too short."""
        s = self.state
        if len(self._rows) < s.window:
            return None
        raw = np.vstack(self._rows)
        raw = np.where(np.isnan(raw), s.raw_fill, raw)
        fm = FeatureMatrix(np.array(self._days, dtype="datetime64[D]"), s.raw_columns, raw)
        with np.errstate(all="ignore"):
            feats = features_from_raw(fm, s.window)
            vals = np.where(np.isfinite(feats.values), feats.values, np.nan)
            feats = feats.with_values(vals, np.isnan(vals))
            cleaned = clean_outliers(feats, s.z_threshold, s.robust)
        filled = forward_fill(cleaned.values)
        filled = np.where(np.isnan(filled), s.feature_fill, filled)
        normed = apply_normalizer(FeatureMatrix(fm.timestamps, feats.feature_names, filled), s.normalizer)
        x = normed.values[-s.lookback:]
        if x.shape[0] < s.lookback:
            # pad the front with the oldest available row
            x = np.vstack([np.repeat(x[:1], s.lookback - x.shape[0], axis=0), x])
        return x

    def assess(self) -> RiskAssessment | None:
        x = self.model_inputs()
        if x is None:
            return None
        inputs = x[None]
        scores = {name: np.asarray(_predict_inputs(m, inputs))[0] for name, m in self.models.items()}
        combined = np.mean(np.stack(list(scores.values())), axis=0)
        post = self.bayes.posteriors(combined) if self.bayes is not None else None
        return RiskAssessment(str(self._days[-1]), scores, combined, post, dict(self.versions))

    def warm_start(self, records: RecordSet, last_n: int | None = None) -> None:
        """Preload the buffer with the tail of a historical record set."""
        raw, _ = pivot_records(records, self.state.raw_columns)
        n = last_n or self.state.buffer_len
        for day, row in zip(raw.timestamps[-n:], raw.values[-n:]):
            self.push_row(day, row)


def _model_width(m) -> int | None:
    if isinstance(m, lstm_mod.LstmClassifier) and m.params is not None:
        return m.params.input_size
    if isinstance(m, trees_mod.TreeClassifier) and m.ensembles:
        return next(iter(m.ensembles.values())).n_features
    return None


def _predict_inputs(m, inputs: np.ndarray) -> np.ndarray:
    if isinstance(m, lstm_mod.LstmClassifier):
        return lstm_mod.predict_proba(m.params, inputs)
    if isinstance(m, trees_mod.TreeClassifier):
        return m.predict_rows(inputs[:, -1, :])
    return m.predict_inputs(inputs)


class DailyWindowScorer:
    """Turns one day's fired windows into a raw row and scores it.

    Windows holding only macro keys (weekend releases) are parked and merged
    into the next day that has daily data, which is where the batch pivot
    places them.
    """

    def __init__(self, engine: RiskEngine):
        self.engine = engine
        self._pending: dict[str, float] = {}
        self.day_counts: dict[str, int] = {}

    def score(self, start: int, end: int, batch: dict[str, AggregateResult]):
        values = dict(self._pending)
        daily = False
        for key, agg in batch.items():
            kind_s, inst = key.split(":", 1)
            kind = Kind(kind_s)
            if kind in DAILY_KINDS:
                daily = True
            for fname, fs in agg.fields.items():
                values[raw_column(kind, inst, fname)] = fs.last
        if not daily:
            self._pending = values
            return None
        self._pending = {}
        day = ms_to_day(start)
        if self.engine._days and day <= self.engine._days[-1]:
            # already in the buffer (warm-start history); nothing new to score
            logger.debug("skipping %s: buffer already holds %s", day, self.engine._days[-1])
            return None
        self.day_counts[str(day)] = sum(a.count for a in batch.values())
        self.engine.push_row(day, self.engine.row_from_values(values))
        a = self.engine.assess()
        if a is None:
            return None
        return a.timestamp, a.combined, a


def batch_assess(records: RecordSet, engine: RiskEngine) -> list[RiskAssessment]:
    """Assess every grid day of a record set in order (the batch oracle for replay)."""
    raw, _ = pivot_records(records, engine.state.raw_columns)
    out = []
    for day, row in zip(raw.timestamps, raw.values):
        engine.push_row(day, row)
        a = engine.assess()
        if a is not None:
            out.append(a)
    return out


# ---------------------------------------------------------------------------
# artifact bundle
# ---------------------------------------------------------------------------

BUNDLE_FILES = {"lstm": "lstm.json", "random_forest": "random_forest.json",
                "gradient_boosting": "gradient_boosting.json"}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:12]


def save_bundle(directory, state: PreprocessState, models: dict[str, object],
                bayes: BayesModel | None = None, warm_records: RecordSet | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "preprocess.json").write_text(json.dumps(state.to_json()))
    for name, m in models.items():
        path = d / BUNDLE_FILES[name]
        if isinstance(m, lstm_mod.LstmClassifier):
            lstm_mod.save_checkpoint(path, m.params, m.cfg)
        else:
            trees_mod.save_checkpoint(path, m)
    if bayes is not None:
        (d / "bayes.json").write_text(json.dumps(bayes.to_json()))
    if warm_records is not None:
        tail = _tail_records(warm_records, state.buffer_len)
        (d / "warm.jsonl").write_text("".join(json.dumps(r.to_json()) + "\n" for r in tail))
    # no wall-clock fields: identical inputs give identical bundles
    manifest = {"format": "riskwatch.bundle", "version": 1,
                "models": {n: _digest(d / BUNDLE_FILES[n]) for n in models}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d


def _tail_records(records: RecordSet, n_days: int) -> list[Record]:
    days = np.unique(np.concatenate([b.timestamps for k, b in records.blocks.items() if k in DAILY_KINDS]))
    first = days[max(0, len(days) - n_days)]
    # include the latest macro release at or before the first kept day
    macro = records.block(Kind.MACRO)
    lo = first
    if macro is not None and len(macro):
        before = macro.timestamps[macro.timestamps <= first]
        if before.size:
            lo = before.max()
    return list(records.slice_dates(lo.astype(object), days[-1].astype(object)))


def load_models(directory) -> tuple[dict[str, object], dict[str, str]]:
    """Load whichever model checkpoints exist in ``directory``; returns (models, versions)."""
    d = Path(directory)
    models: dict[str, object] = {}
    versions = {}
    for name in MODEL_NAMES:
        path = d / BUNDLE_FILES[name]
        if not path.exists():
            continue
        if name == "lstm":
            params, doc = lstm_mod.load_checkpoint(path)
            clf = lstm_mod.LstmClassifier(lstm_mod.TrainConfig(**doc["config"]) if doc.get("config") else None)
            clf.params = params
            models[name] = clf
        else:
            models[name] = trees_mod.load_checkpoint(path)
        versions[name] = _digest(path)
    return models, versions


def load_bundle(directory, cost: CostSpec | None = None) -> RiskEngine:
    d = Path(directory)
    if not (d / "preprocess.json").exists():
        raise FileNotFoundError(f"{d} has no preprocess.json")
    state = PreprocessState.from_json(json.loads((d / "preprocess.json").read_text()))
    models, versions = load_models(d)
    if not models:
        raise FileNotFoundError(f"{d} holds no model checkpoints")
    bayes = None
    if (d / "bayes.json").exists():
        bayes = BayesModel.from_json(json.loads((d / "bayes.json").read_text()))
    engine = RiskEngine(state, models, bayes, cost, versions)
    warm = d / "warm.jsonl"
    if warm.exists():
        recs = [Record.from_json(json.loads(line)) for line in warm.read_text().splitlines() if line.strip()]
        if recs:
            engine.warm_start(RecordSet.from_records(recs))
    return engine


def combined_scores(models: dict[str, object], inputs: np.ndarray) -> np.ndarray:
    """Mean of the models' (N, R) probabilities for (N, lookback, p) inputs."""
    return np.mean(np.stack([np.asarray(_predict_inputs(m, inputs)) for m in models.values()]), axis=0)


def calibrate_models(models: dict[str, object], samples, holdout: float = 0.2) -> BayesModel:
    """Fit the Bayes tables on combined scores of the newest samples.

    Falls back to every sample when the holdout tail lacks a class that the
    full history has for some risk type.
    """
    from .alert import calibrate

    s = samples
    Y = s.labels
    lo = int(len(s) * (1.0 - holdout))
    tail = Y[lo:]
    both = (Y.min(axis=0) < 1) & (Y.max(axis=0) > 0)
    if len(tail) == 0 or not ((tail.min(axis=0) < 1) & (tail.max(axis=0) > 0))[both].all():
        lo = 0
    return calibrate(combined_scores(models, s.inputs[lo:]), Y[lo:])


def train_bundle(directory, records: RecordSet, prepared: PreparedData,
                 lstm_cfg: "lstm_mod.TrainConfig | None" = None,
                 rf_params: "trees_mod.TreeParams | None" = None,
                 gbt_params: "trees_mod.TreeParams | None" = None,
                 z_threshold: float = 8.0) -> Path:
    """Train all three models on every sample, calibrate, and write a bundle."""
    models: dict[str, object] = {
        "lstm": lstm_mod.LstmClassifier(lstm_cfg).fit(prepared.samples),
        "random_forest": trees_mod.TreeClassifier("random_forest", rf_params).fit(prepared.samples),
        "gradient_boosting": trees_mod.TreeClassifier("gradient_boosting", gbt_params).fit(prepared.samples),
    }
    bayes = calibrate_models(models, prepared.samples)
    state = preprocess_state(prepared, records, z_threshold)
    return save_bundle(directory, state, models, bayes, records)
