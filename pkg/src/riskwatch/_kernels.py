"""Hot loops for CART construction and tree-ensemble inference.

Two implementations live side by side: scalar loops compiled with numba
``@njit`` and a vectorised pure-numpy path. ``RISKWATCH_BACKEND=numpy``
selects the numpy path; it is also used when numba cannot be imported.
Both paths follow the same node order, candidate order and arithmetic, so
they build bit-identical trees.
"""
from __future__ import annotations

import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

GINI = 0
VARIANCE = 1

# splits must improve impurity by more than this to be taken
MIN_GAIN = 1e-12


def max_tree_nodes(n_rows: int, max_depth: int, min_leaf: int) -> int:
    """Upper bound on node count: every leaf holds >= min_leaf rows."""
    by_depth = 2 ** (max_depth + 1) - 1
    by_rows = 2 * max(1, n_rows // max(1, min_leaf)) - 1
    return max(1, min(by_depth, by_rows))


# ---------------------------------------------------------------------------
# scalar implementation (compiled by numba when available)
# ---------------------------------------------------------------------------

def _gini_cost(k, s_left, m, s_right):
    """n/2 times the weighted child Gini impurity, as one rounding of an exact ratio.

    With 0/1 targets every product here is an exact integer in float64 (for
    fewer than about 2**17 rows), so splits with equal true impurity compare
    equal and the tie-break on feature index and threshold is exact.
    """
    num = s_left * (k - s_left) * m + s_right * (m - s_right) * k
    return num / (k * m)


def _scan_feature(xs, ys, n, min_leaf, criterion, imp_parent, s_tot, q_tot,
                  best_gain):
    """Best (gain, position) along one sorted feature column, or (best_gain, -1)."""
    best_k = -1
    s_left = 0.0
    q_left = 0.0
    for k in range(1, n):
        y_prev = ys[k - 1]
        s_left += y_prev
        q_left += y_prev * y_prev
        if k < min_leaf or n - k < min_leaf:
            continue
        if not xs[k - 1] < xs[k]:
            continue
        s_right = s_tot - s_left
        q_right = q_tot - q_left
        if criterion == GINI:
            gain = imp_parent - 2.0 * _gini_cost(k, s_left, n - k, s_right) / n
        else:
            m_left = s_left / k
            m_right = s_right / (n - k)
            imp_left = q_left / k - m_left * m_left
            imp_right = q_right / (n - k) - m_right * m_right
            gain = imp_parent - ((k / n) * imp_left + ((n - k) / n) * imp_right)
        if gain > best_gain:
            best_gain = gain
            best_k = k
    return best_gain, best_k


def _build_tree_loops(X, y, rows, criterion, max_depth, min_leaf,
                      n_candidates, feature_keys, max_nodes):
    n_rows = rows.shape[0]
    n_features = X.shape[1]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes, dtype=np.float64)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes, dtype=np.float64)
    count = np.zeros(max_nodes, dtype=np.int64)
    leaf_of = np.zeros(n_rows, dtype=np.int64)

    perm = np.arange(n_rows)
    buf = np.empty(n_rows, dtype=np.int64)
    stack = np.empty((max_nodes, 4), dtype=np.int64)  # node, lo, hi, depth
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_rows
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    all_features = np.arange(n_features)
    subsample = n_candidates < n_features

    while top > 0:
        top -= 1
        node = stack[top, 0]
        lo = stack[top, 1]
        hi = stack[top, 2]
        depth = stack[top, 3]
        n = hi - lo

        s_tot = 0.0
        q_tot = 0.0
        y_min = np.inf
        y_max = -np.inf
        for i in range(lo, hi):
            v = y[rows[perm[i]]]
            s_tot += v
            q_tot += v * v
            if v < y_min:
                y_min = v
            if v > y_max:
                y_max = v
        mean = s_tot / n
        value[node] = mean
        count[node] = n

        best_f = -1
        best_thr = 0.0
        if depth < max_depth and n >= 2 * min_leaf and y_min < y_max:
            if criterion == GINI:
                imp_parent = 2.0 * mean * (1.0 - mean)
            else:
                imp_parent = q_tot / n - mean * mean
            if subsample:
                cand = np.sort(np.argsort(feature_keys[node])[:n_candidates])
            else:
                cand = all_features
            best_gain = MIN_GAIN
            xs = np.empty(n, dtype=np.float64)
            ys = np.empty(n, dtype=np.float64)
            for f in cand:
                for i in range(n):
                    xs[i] = X[rows[perm[lo + i]], f]
                order = np.argsort(xs, kind="mergesort")
                xs_sorted = xs[order]
                for i in range(n):
                    ys[i] = y[rows[perm[lo + order[i]]]]
                gain, k = _scan_feature(xs_sorted, ys, n, min_leaf, criterion,
                                        imp_parent, s_tot, q_tot, best_gain)
                if k >= 0:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (xs_sorted[k - 1] + xs_sorted[k])
                    if thr >= xs_sorted[k]:
                        thr = xs_sorted[k - 1]
                    best_thr = thr

        if best_f < 0:
            for i in range(lo, hi):
                leaf_of[perm[i]] = node
            continue

        # stable partition of perm[lo:hi]
        n_left = 0
        for i in range(lo, hi):
            if X[rows[perm[i]], best_f] <= best_thr:
                buf[lo + n_left] = perm[i]
                n_left += 1
        j = lo + n_left
        for i in range(lo, hi):
            if not X[rows[perm[i]], best_f] <= best_thr:
                buf[j] = perm[i]
                j += 1
        for i in range(lo, hi):
            perm[i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[top, 0] = n_nodes + 1
        stack[top, 1] = lo + n_left
        stack[top, 2] = hi
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = n_nodes
        stack[top, 1] = lo
        stack[top, 2] = lo + n_left
        stack[top, 3] = depth + 1
        top += 1
        n_nodes += 2

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], count[:n_nodes], leaf_of)


def _forest_sum_loops(X, feature, threshold, left, right, value, offsets):
    n = X.shape[0]
    out = np.zeros(n, dtype=np.float64)
    n_trees = offsets.shape[0]
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            base = offsets[t]
            node = 0
            while feature[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            acc += value[base + node]
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# vectorised numpy implementation
# ---------------------------------------------------------------------------

_gini_cost_numpy = _gini_cost


def _best_split_numpy(xs, ys, min_leaf, criterion, imp_parent, s_tot, q_tot):
    n = xs.shape[0]
    k = np.arange(1, n, dtype=np.float64)
    s_left = np.cumsum(ys)[:-1]
    q_left = np.cumsum(ys * ys)[:-1]
    s_right = s_tot - s_left
    q_right = q_tot - q_left
    if criterion == GINI:
        gain = imp_parent - 2.0 * _gini_cost_numpy(k, s_left, n - k, s_right) / n
    else:
        m_left = s_left / k
        m_right = s_right / (n - k)
        imp_left = q_left / k - m_left * m_left
        imp_right = q_right / (n - k) - m_right * m_right
        gain = imp_parent - ((k / n) * imp_left + ((n - k) / n) * imp_right)
    valid = (xs[:-1] < xs[1:]) & (k >= min_leaf) & (n - k >= min_leaf)
    gain = np.where(valid, gain, -np.inf)
    j = int(np.argmax(gain))
    return gain[j], j + 1


def _build_tree_numpy(X, y, rows, criterion, max_depth, min_leaf,
                      n_candidates, feature_keys, max_nodes):
    n_rows = rows.shape[0]
    n_features = X.shape[1]
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    count = np.zeros(max_nodes, dtype=np.int64)
    leaf_of = np.zeros(n_rows, dtype=np.int64)
    Xr = X[rows]
    yr = y[rows]

    stack = [(0, np.arange(n_rows), 0)]
    n_nodes = 1
    while stack:
        node, pos, depth = stack.pop()
        n = pos.shape[0]
        ys_node = yr[pos]
        # sequential sums to match the scalar path bit for bit
        s_tot = float(np.cumsum(ys_node)[-1])
        q_tot = float(np.cumsum(ys_node * ys_node)[-1])
        mean = s_tot / n
        value[node] = mean
        count[node] = n

        best_f, best_thr = -1, 0.0
        if depth < max_depth and n >= 2 * min_leaf and ys_node.min() < ys_node.max():
            if criterion == GINI:
                imp_parent = 2.0 * mean * (1.0 - mean)
            else:
                imp_parent = q_tot / n - mean * mean
            if n_candidates < n_features:
                cand = np.sort(np.argsort(feature_keys[node])[:n_candidates])
            else:
                cand = range(n_features)
            best_gain = MIN_GAIN
            for f in cand:
                xs = Xr[pos, f]
                order = np.argsort(xs, kind="mergesort")
                xs_sorted = xs[order]
                gain, k = _best_split_numpy(xs_sorted, ys_node[order], min_leaf,
                                            criterion, imp_parent, s_tot, q_tot)
                if gain > best_gain:
                    best_gain = gain
                    best_f = int(f)
                    thr = 0.5 * (xs_sorted[k - 1] + xs_sorted[k])
                    if thr >= xs_sorted[k]:
                        thr = xs_sorted[k - 1]
                    best_thr = thr

        if best_f < 0:
            leaf_of[pos] = node
            continue
        go_left = Xr[pos, best_f] <= best_thr
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack.append((n_nodes + 1, pos[~go_left], depth + 1))
        stack.append((n_nodes, pos[go_left], depth + 1))
        n_nodes += 2

    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes], count[:n_nodes], leaf_of)


def _forest_sum_numpy(X, feature, threshold, left, right, value, offsets):
    n = X.shape[0]
    out = np.zeros(n)
    rows = np.arange(n)
    for base in offsets:
        node = np.zeros(n, dtype=np.int64)
        while True:
            f = feature[base + node]
            active = f >= 0
            if not active.any():
                break
            x = X[rows[active], f[active]]
            cur = node[active]
            go_left = x <= threshold[base + cur]
            node[active] = np.where(go_left, left[base + cur], right[base + cur])
        out += value[base + node]
    return out


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

numpy_build_tree = _build_tree_numpy
numpy_forest_sum = _forest_sum_numpy
numba_build_tree = None
numba_forest_sum = None

_requested = os.environ.get("RISKWATCH_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"RISKWATCH_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    from numba import njit

    _gini_cost = njit(cache=True, nogil=True)(_gini_cost)
    _scan_feature = njit(cache=True, nogil=True)(_scan_feature)
    numba_build_tree = njit(cache=True, nogil=True)(_build_tree_loops)
    numba_forest_sum = njit(cache=True, nogil=True)(_forest_sum_loops)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    logger.warning("numba unavailable; using numpy kernels")

if _requested == "numba" and HAVE_NUMBA:
    BACKEND = "numba"
    _build_impl = numba_build_tree
    _forest_impl = numba_forest_sum
else:
    BACKEND = "numpy"
    _build_impl = numpy_build_tree
    _forest_impl = numpy_forest_sum


def build_tree_arrays(X, y, rows, criterion, max_depth, min_leaf,
                      n_candidates, feature_keys=None):
    """Grow one CART tree over ``X[rows]`` and return its flat node arrays.

    Returns ``(feature, threshold, left, right, value, count, leaf_of)``;
    ``feature == -1`` marks a leaf, ``leaf_of[i]`` is the leaf reached by
    ``rows[i]``. ``feature_keys`` (one random row per node id) decides the
    candidate feature subset when ``n_candidates < X.shape[1]``.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    max_nodes = max_tree_nodes(rows.shape[0], max_depth, min_leaf)
    if feature_keys is None:
        feature_keys = np.zeros((1, 1))
    return _build_impl(X, y, rows, int(criterion), int(max_depth), int(min_leaf),
                       int(n_candidates), np.ascontiguousarray(feature_keys), max_nodes)


def forest_sum(X, feature, threshold, left, right, value, offsets):
    """Sum of leaf values over all trees for every row of ``X``."""
    return _forest_impl(np.ascontiguousarray(X, dtype=np.float64), feature,
                        threshold, left, right, value, offsets)
