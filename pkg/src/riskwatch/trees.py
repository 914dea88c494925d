"""CART trees, random forests and gradient-boosted trees.

Trees are stored as flat node arrays (feature == -1 marks a leaf) so the
same layout feeds both the compiled and the numpy inference kernels.
One binary ensemble is trained per risk type.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import _kernels
from .taxonomy import RISK_TYPES, RiskType, parse_risk_type

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-6
CHECKPOINT_FORMAT = "riskwatch.trees"
CHECKPOINT_VERSION = 1


class EnsembleKind(str, Enum):
    RANDOM_FOREST = "random_forest"
    GRADIENT_BOOSTING = "gradient_boosting"


@dataclass(frozen=True)
class TreeParams:
    n_trees: int
    max_depth: int
    min_leaf_samples: int
    learning_rate: float | None = None
    # fraction of features tried per split; None means ceil(sqrt(p)) for RF and all for GBT
    feature_subsample: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 0 or self.min_leaf_samples < 1:
            raise ValueError("n_trees and max_depth must be >= 0 and min_leaf_samples >= 1")
        if self.learning_rate is not None and not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.feature_subsample is not None and not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must lie in (0, 1]")

    @classmethod
    def random_forest(cls, **overrides) -> "TreeParams":
        return cls(**{"n_trees": 500, "max_depth": 10, "min_leaf_samples": 5, **overrides})

    @classmethod
    def gradient_boosting(cls, **overrides) -> "TreeParams":
        return cls(**{"n_trees": 200, "max_depth": 6, "min_leaf_samples": 10,
                      "learning_rate": 0.1, **overrides})

    def n_candidates(self, n_features: int, kind: EnsembleKind) -> int:
        if self.feature_subsample is not None:
            return max(1, int(math.ceil(self.feature_subsample * n_features)))
        if kind is EnsembleKind.RANDOM_FOREST:
            return max(1, int(math.ceil(math.sqrt(n_features))))
        return n_features


@dataclass(frozen=True)
class TreeNode:
    """Pre-order view of one node; ``feature is None`` for leaves."""
    feature: int | None
    threshold: float | None
    left: int | None
    right: int | None
    value: float
    n_samples: int

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    def __len__(self) -> int:
        return self.feature.shape[0]

    @classmethod
    def leaf(cls, value: float, n_samples: int = 0) -> "Tree":
        return cls(np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
                   np.array([float(value)]), np.array([n_samples]))

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def predict_row(self, x) -> float:
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return float(self.value[node])

    def preorder(self) -> list[int]:
        out, stack = [], [0]
        while stack:
            node = stack.pop()
            out.append(node)
            if self.feature[node] >= 0:
                stack.append(self.right[node])
                stack.append(self.left[node])
        return out

    def leaf_depths(self) -> list[tuple[int, int]]:
        """(depth, n_samples) for every leaf."""
        out, stack = [], [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.feature[node] < 0:
                out.append((d, int(self.count[node])))
            else:
                stack.append((self.right[node], d + 1))
                stack.append((self.left[node], d + 1))
        return out

    def depth(self) -> int:
        return max(d for d, _ in self.leaf_depths())

    def nodes(self) -> list[TreeNode]:
        order = self.preorder()
        pos = {node: k for k, node in enumerate(order)}
        out = []
        for node in order:
            if self.feature[node] < 0:
                out.append(TreeNode(None, None, None, None, float(self.value[node]), int(self.count[node])))
            else:
                out.append(TreeNode(int(self.feature[node]), float(self.threshold[node]),
                                    pos[self.left[node]], pos[self.right[node]],
                                    float(self.value[node]), int(self.count[node])))
        return out

    @classmethod
    def from_nodes(cls, nodes: list[TreeNode]) -> "Tree":
        n = len(nodes)
        if n == 0:
            raise ValueError("a tree needs at least one node")
        t = cls(np.full(n, -1, dtype=np.int64), np.zeros(n), np.full(n, -1, dtype=np.int64),
                np.full(n, -1, dtype=np.int64), np.zeros(n), np.zeros(n, dtype=np.int64))
        for k, nd in enumerate(nodes):
            t.value[k] = nd.value
            t.count[k] = nd.n_samples
            if not nd.is_leaf:
                if not (k < nd.left < n and k < nd.right < n):
                    raise ValueError(f"node {k} has child indices outside the tree")
                t.feature[k] = nd.feature
                t.threshold[k] = nd.threshold
                t.left[k] = nd.left
                t.right[k] = nd.right
        return t

    def to_json(self) -> list[dict]:
        out = []
        for nd in self.nodes():
            if nd.is_leaf:
                out.append({"leaf": nd.value, "n": nd.n_samples})
            else:
                out.append({"feature": nd.feature, "threshold": nd.threshold,
                            "left": nd.left, "right": nd.right, "value": nd.value, "n": nd.n_samples})
        return out

    @classmethod
    def from_json(cls, records: list[dict]) -> "Tree":
        nodes = []
        for r in records:
            if "leaf" in r:
                nodes.append(TreeNode(None, None, None, None, float(r["leaf"]), int(r["n"])))
            else:
                nodes.append(TreeNode(int(r["feature"]), float(r["threshold"]), int(r["left"]),
                                      int(r["right"]), float(r["value"]), int(r["n"])))
        return cls.from_nodes(nodes)


def _tree_from_arrays(arrays) -> Tree:
    feature, threshold, left, right, value, count, _ = arrays
    return Tree(feature.copy(), threshold.copy(), left.copy(), right.copy(), value.copy(), count.copy())


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("X must be a non-empty 2-D array")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise ValueError("X and y must be finite")
    return X, y


def build_tree(X, y, params: TreeParams, rng=None, *, regression: bool = False,
               rows=None, n_candidates: int | None = None) -> Tree:
    """Grow one CART tree (Gini for 0/1 targets, variance for regression)."""
    X, y = _check_xy(X, y)
    if rows is None:
        rows = np.arange(X.shape[0])
    p = X.shape[1]
    m = p if n_candidates is None else min(p, n_candidates)
    keys = None
    if m < p:
        if rng is None:
            raise ValueError("feature subsampling needs an rng")
        max_nodes = _kernels.max_tree_nodes(len(rows), params.max_depth, params.min_leaf_samples)
        keys = rng.random((max_nodes, p))
    criterion = _kernels.VARIANCE if regression else _kernels.GINI
    arrays = _kernels.build_tree_arrays(X, y, rows, criterion, params.max_depth,
                                        params.min_leaf_samples, m, keys)
    return _tree_from_arrays(arrays)


@dataclass
class TreeEnsemble:
    kind: EnsembleKind
    trees: list[Tree]
    base_score: float
    params: TreeParams
    n_features: int
    risk_type: RiskType | None = None
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.trees) > self.params.n_trees:
            raise ValueError("ensemble holds more trees than params.n_trees")
        if self.kind is EnsembleKind.RANDOM_FOREST and self.base_score != 0.0:
            raise ValueError("random forests carry no base score")
        if self.kind is EnsembleKind.RANDOM_FOREST and not self.trees:
            raise ValueError("a random forest needs at least one tree")
        self._packed = None

    def _pack(self):
        if self._packed is None:
            sizes = [len(t) for t in self.trees]
            offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes \
                else np.zeros(0, dtype=np.int64)
            cat = lambda name, dt: (np.concatenate([getattr(t, name) for t in self.trees]).astype(dt)
                                    if self.trees else np.zeros(0, dtype=dt))
            self._packed = (cat("feature", np.int64), cat("threshold", np.float64),
                            cat("left", np.int64), cat("right", np.int64),
                            cat("value", np.float64), offsets)
        return self._packed

    def decision_function(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _kernels.forest_sum(X, *self._pack())

    def predict_proba(self, X) -> np.ndarray:
        total = self.decision_function(X)
        if self.kind is EnsembleKind.RANDOM_FOREST:
            return np.clip(total / len(self.trees), 0.0, 1.0)
        lr = self.params.learning_rate or 0.0
        return _sigmoid(self.base_score + lr * total)

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind.value,
            "risk_type": self.risk_type.value if self.risk_type else None,
            "params": asdict(self.params),
            "base_score": self.base_score,
            "n_features": self.n_features,
            "loss_history": list(self.loss_history),
            "trees": [t.to_json() for t in self.trees],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TreeEnsemble":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a tree-ensemble checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported tree checkpoint version {doc.get('version')}")
        rt = doc.get("risk_type")
        return cls(EnsembleKind(doc["kind"]), [Tree.from_json(t) for t in doc["trees"]],
                   float(doc["base_score"]), TreeParams(**doc["params"]), int(doc["n_features"]),
                   parse_risk_type(rt) if rt else None, list(doc.get("loss_history", [])))


def predict(ensemble: TreeEnsemble, x) -> float:
    """Probability for one feature row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict takes a single feature row")
    return float(ensemble.predict_proba(x[None])[0])


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def logistic_loss(y, F) -> float:
    """Mean logistic loss of margins ``F``, computed without clamping."""
    return float(np.mean(y * np.logaddexp(0.0, -F) + (1.0 - y) * np.logaddexp(0.0, F)))


def fit_random_forest(X, y, params: TreeParams, n_jobs: int = 1, risk_type=None) -> TreeEnsemble:
    """Bootstrap-aggregated Gini trees; tree t draws from rng(seed, t)."""
    X, y = _check_xy(X, y)
    if params.n_trees < 1:
        raise ValueError("a random forest needs n_trees >= 1")
    n = X.shape[0]
    m = params.n_candidates(X.shape[1], EnsembleKind.RANDOM_FOREST)

    def one(t):
        rng = np.random.default_rng([params.seed, t])
        rows = rng.integers(0, n, size=n)
        return build_tree(X, y, params, rng, rows=rows, n_candidates=m)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(one, range(params.n_trees)))
    else:
        trees = [one(t) for t in range(params.n_trees)]
    return TreeEnsemble(EnsembleKind.RANDOM_FOREST, trees, 0.0, params, X.shape[1], risk_type)


def fit_gradient_boosting(X, y, params: TreeParams, risk_type=None) -> TreeEnsemble:
    """Logistic-loss boosting with Newton leaf values; records the training loss per iteration."""
    X, y = _check_xy(X, y)
    lr = 0.1 if params.learning_rate is None else params.learning_rate
    params = replace(params, learning_rate=lr)
    rate = float(np.clip(y.mean(), PROB_CLIP, 1.0 - PROB_CLIP))
    base = math.log(rate / (1.0 - rate))
    m = params.n_candidates(X.shape[1], EnsembleKind.GRADIENT_BOOSTING)
    rows = np.arange(X.shape[0])
    F = np.full(X.shape[0], base)
    history = [logistic_loss(y, F)]
    trees = []
    for t in range(params.n_trees):
        p = _sigmoid(F)
        resid = y - p
        rng = np.random.default_rng([params.seed, t]) if m < X.shape[1] else None
        keys = rng.random((_kernels.max_tree_nodes(len(rows), params.max_depth,
                                                   params.min_leaf_samples), X.shape[1])) if rng else None
        arrays = _kernels.build_tree_arrays(X, resid, rows, _kernels.VARIANCE, params.max_depth,
                                            params.min_leaf_samples, m, keys)
        tree = _tree_from_arrays(arrays)
        leaf_of = arrays[6]
        num = np.bincount(leaf_of, weights=resid, minlength=len(tree))
        den = np.bincount(leaf_of, weights=p * (1.0 - p), minlength=len(tree))
        is_leaf = tree.feature < 0
        safe = is_leaf & (den > 0)
        tree.value[is_leaf] = 0.0
        tree.value[safe] = num[safe] / den[safe]
        trees.append(tree)
        F = F + lr * tree.value[leaf_of]
        history.append(logistic_loss(y, F))
    return TreeEnsemble(EnsembleKind.GRADIENT_BOOSTING, trees, base, params, X.shape[1],
                        risk_type, history)


def _binary_target(samples, risk_type) -> tuple[np.ndarray, np.ndarray]:
    if len(samples) == 0:
        raise ValueError("empty sample set")
    rt = parse_risk_type(risk_type) if isinstance(risk_type, str) else risk_type
    col = RISK_TYPES.index(rt)
    return samples.last_rows(), samples.labels[:, col].astype(np.float64)


def rf_train(samples, risk_type, params: TreeParams | None = None, n_jobs: int = 1) -> TreeEnsemble:
    X, y = _binary_target(samples, risk_type)
    return fit_random_forest(X, y, params or TreeParams.random_forest(), n_jobs,
                             RiskType(risk_type))


def gbt_train(samples, risk_type, params: TreeParams | None = None) -> TreeEnsemble:
    X, y = _binary_target(samples, risk_type)
    return fit_gradient_boosting(X, y, params or TreeParams.gradient_boosting(), RiskType(risk_type))


class TreeClassifier:
    """One binary ensemble per risk type over the last row of each window."""

    def __init__(self, kind: EnsembleKind | str, params: TreeParams | None = None, n_jobs: int = 1):
        self.kind = EnsembleKind(kind)
        if params is None:
            params = (TreeParams.random_forest() if self.kind is EnsembleKind.RANDOM_FOREST
                      else TreeParams.gradient_boosting())
        self.params = params
        self.n_jobs = n_jobs
        self.ensembles: dict[RiskType, TreeEnsemble] = {}

    def fit(self, samples) -> "TreeClassifier":
        for rt in RISK_TYPES:
            if self.kind is EnsembleKind.RANDOM_FOREST:
                self.ensembles[rt] = rf_train(samples, rt, self.params, self.n_jobs)
            else:
                self.ensembles[rt] = gbt_train(samples, rt, self.params)
        return self

    def predict_rows(self, X) -> np.ndarray:
        if not self.ensembles:
            raise RuntimeError("model is not fitted")
        return np.column_stack([self.ensembles[rt].predict_proba(X) for rt in RISK_TYPES])

    def predict_proba(self, samples) -> np.ndarray:
        return self.predict_rows(samples.last_rows())

    def to_json(self) -> dict:
        return {"format": CHECKPOINT_FORMAT + ".multi", "version": CHECKPOINT_VERSION,
                "kind": self.kind.value,
                "ensembles": {rt.value: e.to_json() for rt, e in self.ensembles.items()}}

    @classmethod
    def from_json(cls, doc: dict) -> "TreeClassifier":
        if doc.get("format") != CHECKPOINT_FORMAT + ".multi":
            raise ValueError("not a multi-label tree checkpoint")
        ens = {parse_risk_type(k): TreeEnsemble.from_json(v) for k, v in doc["ensembles"].items()}
        first = next(iter(ens.values()))
        model = cls(doc["kind"], first.params)
        model.ensembles = ens
        return model


def save_checkpoint(path, model) -> None:
    Path(path).write_text(json.dumps(model.to_json()))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") == CHECKPOINT_FORMAT + ".multi":
        return TreeClassifier.from_json(doc)
    return TreeEnsemble.from_json(doc)
