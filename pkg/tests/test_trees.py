from __future__ import annotations

import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskwatch import _kernels
from riskwatch.trees import (
    EnsembleKind, Tree, TreeClassifier, TreeEnsemble, TreeParams, build_tree, fit_gradient_boosting,
    fit_random_forest, gbt_train, load_checkpoint, predict, rf_train, save_checkpoint,
)
from riskwatch.taxonomy import RiskType

from oracles import best_root_split, gini


def blobs(seed=0, n=200):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(-3, 1, (n // 2, 2)), rng.normal(3, 1, (n // 2, 2))])
    y = np.r_[np.zeros(n // 2), np.ones(n // 2)]
    return X, y


def assert_constraints(tree: Tree, max_depth: int, min_leaf: int):
    for depth, n in tree.leaf_depths():
        assert depth <= max_depth
        assert n >= min_leaf
    assert np.isfinite(tree.value).all()
    assert np.isfinite(tree.threshold[tree.feature >= 0]).all()


def test_table1_defaults():
    rf, gbt = TreeParams.random_forest(), TreeParams.gradient_boosting()
    assert (rf.n_trees, rf.max_depth, rf.min_leaf_samples, rf.learning_rate) == (500, 10, 5, None)
    assert (gbt.n_trees, gbt.max_depth, gbt.min_leaf_samples, gbt.learning_rate) == (200, 6, 10, 0.1)


# -- build_tree -------------------------------------------------------------

def test_one_d_boundary_split():
    tree = build_tree(np.array([[1.0], [2.0], [3.0], [4.0]]), [0, 0, 1, 1],
                      TreeParams(1, max_depth=1, min_leaf_samples=1))
    assert tree.feature[0] == 0
    assert 2.0 < tree.threshold[0] <= 3.0
    assert tree.threshold[0] == 2.5
    assert tree.value[tree.left[0]] == 0.0 and tree.value[tree.right[0]] == 1.0


def test_pure_targets_single_leaf():
    tree = build_tree(np.random.default_rng(0).normal(size=(20, 3)), np.ones(20), TreeParams(1, 5, 1))
    assert len(tree) == 1 and tree.value[0] == 1.0


def test_min_leaf_equal_to_rows_single_leaf():
    X, y = blobs(n=20)
    tree = build_tree(X, y, TreeParams(1, 5, min_leaf_samples=20))
    assert len(tree) == 1 and tree.value[0] == 0.5


def test_constant_features_equal_targets_leaf():
    tree = build_tree(np.ones((10, 2)), np.zeros(10), TreeParams(1, 3, 1))
    assert len(tree) == 1


def test_empty_data_rejected():
    with pytest.raises(ValueError):
        build_tree(np.zeros((0, 2)), [], TreeParams(1, 3, 1))


def _split_rows(tree: Tree, X) -> frozenset:
    f, t = tree.feature[0], tree.threshold[0]
    return frozenset(np.flatnonzero(X[:, f] <= t).tolist())


def check_root_split_optimal(seed: int):
    rng = np.random.default_rng(seed)
    n, p = int(rng.integers(4, 51)), int(rng.integers(1, 4))
    X = rng.integers(0, 6, size=(n, p)).astype(float) + rng.normal(0, 0.01, (n, p)) * rng.integers(0, 2)
    y = rng.integers(0, 2, n).astype(float)
    min_leaf = int(rng.integers(1, 4))
    tree = build_tree(X, y, TreeParams(1, max_depth=1, min_leaf_samples=min_leaf))
    best = best_root_split(X, y, min_leaf)
    if best is None or best[0] <= 1e-12:
        assert len(tree) == 1
        return
    assert len(tree) == 3
    left = _split_rows(tree, X)
    yl = [y[i] for i in left]
    yr = [y[i] for i in range(n) if i not in left]
    gain = gini(y) - len(yl) / n * gini(yl) - len(yr) / n * gini(yr)
    assert gain == pytest.approx(best[0], abs=1e-12)
    if tree.feature[0] == best[1]:
        assert left == best[2]
    else:
        # only an exact tie may pick a different feature, and then the lower index wins
        assert tree.feature[0] < best[1]


@pytest.mark.parametrize("seed", range(50))
def test_root_split_matches_enumeration(seed):
    check_root_split_optimal(seed)


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32), st.integers(1, 6), st.integers(1, 8), st.booleans())
def test_structural_constraints(seed, depth, min_leaf, regression):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, 3))
    y = rng.normal(size=120) if regression else (X[:, 0] + rng.normal(0, 0.5, 120) > 0).astype(float)
    tree = build_tree(X, y, TreeParams(1, depth, min_leaf), regression=regression)
    assert_constraints(tree, depth, min_leaf)


# -- backend equivalence ------------------------------------------------------

@pytest.mark.skipif(_kernels.numba_build_tree is None, reason="numba not installed")
@pytest.mark.parametrize("seed", range(8))
def test_numba_and_numpy_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(300, 6)), 1)
    y = (X[:, 0] - X[:, 2] + rng.normal(0, 0.5, 300) > 0).astype(float)
    rows = rng.integers(0, 300, 300)
    keys = rng.random((_kernels.max_tree_nodes(300, 6, 3), 6))
    for crit, target in ((_kernels.GINI, y), (_kernels.VARIANCE, y - 0.3 * X[:, 1])):
        args = (X, target, rows, crit, 6, 3, 3, keys, _kernels.max_tree_nodes(300, 6, 3))
        a = _kernels.numba_build_tree(*args)
        b = _kernels.numpy_build_tree(*args)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
        tree = Tree(*[np.asarray(u).copy() for u in a[:6]])
        offsets = np.zeros(1, dtype=np.int64)
        packed = (tree.feature, tree.threshold, tree.left, tree.right, tree.value, offsets)
        np.testing.assert_array_equal(_kernels.numba_forest_sum(X, *packed),
                                      _kernels.numpy_forest_sum(X, *packed))


def test_backend_env_selects_numpy():
    code = ("import riskwatch._kernels as k, riskwatch.trees as t, numpy as np, json;"
            "X=np.arange(40.).reshape(20,2); y=(X[:,0]>15).astype(float);"
            "e=t.fit_random_forest(X,y,t.TreeParams(5,3,2,seed=1));"
            "print(json.dumps([k.BACKEND, e.predict_proba(X).tolist()]))")
    out = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, RISKWATCH_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[backend] = json.loads(res.stdout)
    assert out["numpy"][0] == "numpy"
    assert out["numpy"][1] == out["numba"][1]


def test_backend_env_rejects_unknown():
    env = dict(os.environ, RISKWATCH_BACKEND="cuda")
    res = subprocess.run([sys.executable, "-c", "import riskwatch._kernels"], env=env,
                         capture_output=True, text=True)
    assert res.returncode != 0 and "RISKWATCH_BACKEND" in res.stderr


# -- random forest ------------------------------------------------------------

def test_rf_separable_blobs_accuracy():
    X, y = blobs()
    rf = fit_random_forest(X, y, TreeParams.random_forest(seed=3))
    assert len(rf.trees) == 500
    acc = np.mean((rf.predict_proba(X) >= 0.5) == y)
    assert acc >= 0.99
    for tree in rf.trees:
        assert_constraints(tree, 10, 5)


def test_rf_all_negative_labels():
    X, _ = blobs(n=40)
    rf = fit_random_forest(X, np.zeros(40), TreeParams(20, 10, 5))
    assert all(len(t) == 1 and t.value[0] == 0.0 for t in rf.trees)
    assert np.all(rf.predict_proba(X) == 0.0)


def test_rf_parallel_equals_sequential():
    X, y = blobs(seed=4)
    params = TreeParams(16, 6, 3, seed=9)
    a = fit_random_forest(X, y, params, n_jobs=1)
    b = fit_random_forest(X, y, params, n_jobs=4)
    assert a.to_json() == b.to_json()


def test_rf_tree_index_determines_tree():
    X, y = blobs(seed=5)
    small = fit_random_forest(X, y, TreeParams(4, 6, 3, seed=2))
    big = fit_random_forest(X, y, TreeParams(8, 6, 3, seed=2))
    for t_small, t_big in zip(small.trees, big.trees):
        assert t_small.to_json() == t_big.to_json()


# -- gradient boosting --------------------------------------------------------

def test_gbt_balanced_base_score_zero():
    X, y = blobs(n=40)
    assert fit_gradient_boosting(X, y, TreeParams(3, 2, 2, learning_rate=0.1)).base_score == 0.0


def test_gbt_learning_rate_zero_constant():
    X, y = blobs(n=60)
    y[:10] = 1
    m = fit_gradient_boosting(X, y, TreeParams(5, 3, 2, learning_rate=0.0))
    rate = y.mean()
    assert np.allclose(m.predict_proba(X), rate, atol=1e-12)


def test_gbt_degenerate_rates_clamped():
    X, _ = blobs(n=30)
    m = fit_gradient_boosting(X, np.zeros(30), TreeParams(3, 2, 2, learning_rate=0.1))
    assert m.base_score == pytest.approx(math.log(1e-6 / (1 - 1e-6)))
    assert np.isfinite(m.predict_proba(X)).all()


def test_gbt_loss_curve_on_blobs():
    X, y = blobs(seed=6)
    y[np.random.default_rng(0).random(len(y)) < 0.1] = 1 - y[:1]
    m = fit_gradient_boosting(X, y, TreeParams.gradient_boosting(n_trees=60))
    h = np.array(m.loss_history)
    assert h[-1] < h[0]
    assert np.mean(np.diff(h) <= 0) >= 0.9
    for tree in m.trees:
        assert_constraints(tree, 6, 10)


# -- predict ------------------------------------------------------------------

def test_rf_of_unit_leaves_predicts_one():
    ens = TreeEnsemble(EnsembleKind.RANDOM_FOREST, [Tree.leaf(1.0)] * 3, 0.0, TreeParams(3, 1, 1), 2)
    assert predict(ens, [0.3, -1.0]) == 1.0


def test_gbt_without_trees_is_sigmoid_base():
    ens = TreeEnsemble(EnsembleKind.GRADIENT_BOOSTING, [], 0.7, TreeParams(0, 1, 1, 0.1), 2)
    assert predict(ens, [1.0, 2.0]) == pytest.approx(1 / (1 + math.exp(-0.7)), abs=1e-15)


def test_hand_built_two_tree_forest():
    stump = lambda lo, hi: Tree(np.array([0, -1, -1]), np.array([0.0, 0, 0]), np.array([1, -1, -1]),
                                np.array([2, -1, -1]), np.array([0.5, lo, hi]), np.array([2, 1, 1]))
    ens = TreeEnsemble(EnsembleKind.RANDOM_FOREST, [stump(0.0, 1.0), stump(1.0, 0.0)], 0.0,
                       TreeParams(2, 1, 1), 1)
    assert predict(ens, [5.0]) == 0.5
    assert predict(ens, [-5.0]) == 0.5


def test_predict_width_mismatch():
    ens = TreeEnsemble(EnsembleKind.RANDOM_FOREST, [Tree.leaf(1.0)], 0.0, TreeParams(1, 1, 1), 2)
    with pytest.raises(ValueError):
        predict(ens, [1.0, 2.0, 3.0])


@settings(max_examples=25)
@given(st.integers(0, 2 ** 32))
def test_probability_range(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    y = (rng.random(60) < 0.3).astype(float)
    probe = rng.normal(0, 10, size=(50, 3))
    for m in (fit_random_forest(X, y, TreeParams(5, 4, 2, seed=seed % 100)),
              fit_gradient_boosting(X, y, TreeParams(10, 3, 2, learning_rate=0.3))):
        p = m.predict_proba(probe)
        assert ((p >= 0) & (p <= 1)).all()


# -- checkpoints --------------------------------------------------------------

def test_ensemble_checkpoint_round_trip(tmp_path):
    X, y = blobs(seed=7)
    for m in (fit_random_forest(X, y, TreeParams(5, 4, 2, seed=1)),
              fit_gradient_boosting(X, y, TreeParams(5, 3, 2, learning_rate=0.1))):
        save_checkpoint(tmp_path / "e.json", m)
        back = load_checkpoint(tmp_path / "e.json")
        assert back.to_json() == m.to_json()
        assert np.array_equal(back.predict_proba(X), m.predict_proba(X))


def test_preorder_node_records():
    tree = build_tree(*blobs(seed=8, n=60), TreeParams(1, 3, 2))
    records = tree.to_json()
    for k, r in enumerate(records):
        if "leaf" not in r:
            assert k < r["left"] < r["right"] or k < r["right"]
    assert Tree.from_json(records).to_json() == records


def test_multilabel_classifier_round_trip(tmp_path, small_samples):
    model = TreeClassifier("random_forest", TreeParams(4, 4, 5, seed=1)).fit(small_samples)
    save_checkpoint(tmp_path / "rf.json", model)
    back = load_checkpoint(tmp_path / "rf.json")
    assert np.array_equal(back.predict_proba(small_samples), model.predict_proba(small_samples))
    rf = rf_train(small_samples, RiskType.LIQUIDITY, TreeParams(3, 3, 5))
    gb = gbt_train(small_samples, "liquidity", TreeParams(3, 3, 5, learning_rate=0.1))
    assert rf.risk_type is gb.risk_type is RiskType.LIQUIDITY
