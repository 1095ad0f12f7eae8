"""Binary decision tree with threshold splits and best-first growth.

The learner supports exactly five structural hyperparameters (leaf budget,
depth limit, purity measure, minimum rows per leaf, minimum rows to split)
plus per-class weights. Growth is best-first: the frontier leaf whose best
split gives the largest weighted impurity decrease is expanded next, so the
leaf budget acts globally.

The hot loop (split search and in-place stable partitioning of presorted row
lists) is compiled with numba; everything else is plain numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

GINI = "gini"
ENTROPY = "entropy"
PURITY_MEASURES = (ENTROPY, GINI)

# gains closer than this to the best gain count as ties
GAIN_TIE_TOL = 1e-12

_CRITERION_CODE = {GINI: 0, ENTROPY: 1}


@dataclass(frozen=True)
class TreeModelParams:
    max_leaves: int
    max_depth: int
    purity_measure: str
    min_samples_leaf: int
    min_samples_split: int

    def __post_init__(self):
        if self.purity_measure not in PURITY_MEASURES:
            raise ValueError(f"unknown purity measure {self.purity_measure!r}")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")

    def as_dict(self) -> dict:
        return {
            "max_leaves": self.max_leaves,
            "max_depth": self.max_depth,
            "purity_measure": self.purity_measure,
            "min_samples_leaf": self.min_samples_leaf,
            "min_samples_split": self.min_samples_split,
        }


@dataclass(frozen=True)
class ClassWeights:
    w0: float = 1.0
    w1: float = 1.0

    def __post_init__(self):
        for w in (self.w0, self.w1):
            if not (math.isfinite(w) and w > 0):
                raise ValueError(f"class weights must be finite and > 0, got {w}")

    @classmethod
    def balanced(cls, y) -> "ClassWeights":
        """``w_c = n / (2 * n_c)``; the minority class gets the larger weight."""
        y = np.asarray(y)
        n = len(y)
        n1 = int(np.count_nonzero(y))
        n0 = n - n1
        if n0 == 0 or n1 == 0:
            raise ValueError("balanced weights need both classes present")
        return cls(n / (2.0 * n0), n / (2.0 * n1))


@dataclass
class Tree:
    """Flat array representation; ``feature[i] == -1`` marks a leaf.

    ``counts[i]`` holds the unweighted (class 0, class 1) training row counts
    of node ``i``; weighted counts are ``counts * (w0, w1)``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    depth: np.ndarray
    weights: ClassWeights
    n_features: int
    params: TreeModelParams | None = field(default=None, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.is_leaf))

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    @property
    def weighted_counts(self) -> np.ndarray:
        return self.counts * np.array([self.weights.w0, self.weights.w1])

    @property
    def label(self) -> np.ndarray:
        wc = self.weighted_counts
        return (wc[:, 1] > wc[:, 0]).astype(np.int8)

    def structurally_equal(self, other: "Tree") -> bool:
        return (
            self.n_features == other.n_features
            and np.array_equal(self.feature, other.feature)
            and np.array_equal(self.threshold, other.threshold)
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
            and np.array_equal(self.counts, other.counts)
        )


def impurity(weighted_counts, measure: str) -> float:
    c0, c1 = (float(c) for c in weighted_counts)
    total = c0 + c1
    if not total > 0:
        raise ValueError("impurity needs a positive total weight")
    if measure not in _CRITERION_CODE:
        raise ValueError(f"unknown purity measure {measure!r}")
    return _impurity(c0, c1, _CRITERION_CODE[measure])


@njit(cache=True)
def _impurity(c0, c1, crit):
    total = c0 + c1
    p0 = c0 / total
    p1 = c1 / total
    if crit == 0:
        return 1.0 - p0 * p0 - p1 * p1
    h = 0.0
    if p0 > 0.0:
        h -= p0 * math.log2(p0)
    if p1 > 0.0:
        h -= p1 * math.log2(p1)
    return h


@njit(cache=True)
def _split_gain(cl0, cl1, c0, c1, w0, w1, parent_imp, crit):
    wl0 = w0 * cl0
    wl1 = w1 * cl1
    wr0 = w0 * (c0 - cl0)
    wr1 = w1 * (c1 - cl1)
    wl = wl0 + wl1
    wr = wr0 + wr1
    total = wl + wr
    return (
        parent_imp
        - (wl / total) * _impurity(wl0, wl1, crit)
        - (wr / total) * _impurity(wr0, wr1, crit)
    )


@njit(cache=True)
def _node_best_split(X, y, S, start, end, c0, c1, w0, w1, crit, msl, tol, gains):
    """Scan every feature's presorted row segment; returns (feature, threshold, gain).

    Feature -1 means no admissible split with positive gain. ``gains`` is a
    scratch buffer shaped like ``S``.
    """
    d = S.shape[0]
    n = end - start
    parent_imp = _impurity(w0 * c0, w1 * c1, crit)
    best = -1.0
    for f in range(d):
        cl0 = 0
        cl1 = 0
        for i in range(start, end - 1):
            gains[f, i] = -1.0
            r = S[f, i]
            if y[r] == 1:
                cl1 += 1
            else:
                cl0 += 1
            nl = i - start + 1
            if nl < msl or n - nl < msl:
                continue
            if X[r, f] < X[S[f, i + 1], f]:
                g = _split_gain(cl0, cl1, c0, c1, w0, w1, parent_imp, crit)
                gains[f, i] = g
                if g > best:
                    best = g
    if best <= tol:
        return -1, 0.0, 0.0
    # lowest feature, then lowest threshold, among near-ties of the max
    for f in range(d):
        for i in range(start, end - 1):
            g = gains[f, i]
            if g >= best - tol:
                a = X[S[f, i], f]
                b = X[S[f, i + 1], f]
                t = a + (b - a) / 2.0
                if t >= b:
                    t = a
                return f, t, g
    return -1, 0.0, 0.0


@njit(cache=True)
def _grow(X, y, S, max_leaves, max_depth, crit, msl, mss, w0, w1, tol):
    d, m = S.shape
    cap = 2 * max_leaves - 1
    start = np.zeros(cap, np.int64)
    end = np.zeros(cap, np.int64)
    depth = np.zeros(cap, np.int64)
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    counts = np.zeros((cap, 2), np.int64)
    cand_f = np.full(cap, -1, np.int64)
    cand_t = np.zeros(cap, np.float64)
    cand_p = np.zeros(cap, np.float64)
    go_left = np.zeros(X.shape[0], np.bool_)
    buf = np.empty(m, np.int64)
    gains = np.empty((d, m), np.float64)

    end[0] = m
    c1 = 0
    for i in range(m):
        c1 += y[S[0, i]]
    counts[0, 0] = m - c1
    counts[0, 1] = c1
    n_nodes = 1

    node = 0
    while True:
        # evaluate the newest nodes (root, or the two children of the last split)
        for k in range(node, n_nodes):
            n = end[k] - start[k]
            k0 = counts[k, 0]
            k1 = counts[k, 1]
            if depth[k] >= max_depth or n < mss or n < 2 * msl or k0 == 0 or k1 == 0:
                continue
            f, t, g = _node_best_split(X, y, S, start[k], end[k], k0, k1, w0, w1, crit, msl, tol, gains)
            if f >= 0:
                cand_f[k] = f
                cand_t[k] = t
                cand_p[k] = (w0 * k0 + w1 * k1) * g
        node = n_nodes
        n_leaves = (n_nodes + 1) // 2
        if n_leaves >= max_leaves:
            break
        best = -1.0
        for k in range(n_nodes):
            if cand_f[k] >= 0 and cand_p[k] > best:
                best = cand_p[k]
        if best < 0.0:
            break
        # near-equal priorities: the oldest frontier leaf wins
        pick = -1
        for k in range(n_nodes):
            if cand_f[k] >= 0 and cand_p[k] >= best - tol * max(1.0, best):
                pick = k
                break

        f = cand_f[pick]
        t = cand_t[pick]
        s = start[pick]
        e = end[pick]
        nl = 0
        lc1 = 0
        for i in range(s, e):
            r = S[f, i]
            if X[r, f] <= t:
                go_left[r] = True
                nl += 1
                lc1 += y[r]
            else:
                go_left[r] = False
        for g in range(d):
            a = 0
            b = nl
            for i in range(s, e):
                r = S[g, i]
                if go_left[r]:
                    buf[a] = r
                    a += 1
                else:
                    buf[b] = r
                    b += 1
            for i in range(e - s):
                S[g, s + i] = buf[i]

        feature[pick] = f
        threshold[pick] = t
        cand_f[pick] = -1
        li = n_nodes
        ri = n_nodes + 1
        left[pick] = li
        right[pick] = ri
        start[li] = s
        end[li] = s + nl
        start[ri] = s + nl
        end[ri] = e
        depth[li] = depth[pick] + 1
        depth[ri] = depth[pick] + 1
        counts[li, 0] = nl - lc1
        counts[li, 1] = lc1
        counts[ri, 0] = counts[pick, 0] - counts[li, 0]
        counts[ri, 1] = counts[pick, 1] - lc1
        n_nodes += 2

    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        counts[:n_nodes],
        depth[:n_nodes],
    )


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d matrix")
    y = np.ascontiguousarray(y, dtype=np.int8)
    if len(X) == 0:
        raise ValueError("cannot fit on empty input")
    if len(y) != len(X):
        raise ValueError("X and y row counts differ")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return X, y


def presort(X, rows=None) -> np.ndarray:
    """Per-feature stable ordering of ``rows`` (all rows by default), shape (d, m)."""
    if rows is None:
        return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    rows = np.asarray(rows, dtype=np.int64)
    order = np.argsort(X[rows], axis=0, kind="stable").T
    return np.ascontiguousarray(rows[order])


def best_split(rows, labels, weights: ClassWeights, params: TreeModelParams):
    """Best admissible split of a single node holding all given rows.

    Returns ``(feature_index, threshold, impurity_decrease)`` where the
    decrease is normalised by the node's total weight, or ``None``.
    """
    X, y = _check_xy(rows, labels)
    if len(X) < params.min_samples_split:
        return None
    c1 = int(y.sum())
    S = presort(X)
    f, t, g = _node_best_split(
        X, y, S, 0, len(X), len(X) - c1, c1, weights.w0, weights.w1,
        _CRITERION_CODE[params.purity_measure], params.min_samples_leaf, GAIN_TIE_TOL,
        np.empty(S.shape, np.float64),
    )
    if f < 0:
        return None
    return int(f), float(t), float(g)


def fit(X, y, params: TreeModelParams, weights: ClassWeights | None = None, *, sorted_rows=None) -> Tree:
    """Grow a tree on ``X``/``y``.

    ``sorted_rows`` may carry a precomputed :func:`presort` of a row subset
    of ``X``; the tree is then trained on that subset only. It is copied, so
    callers can reuse it across fits.
    """
    X, y = _check_xy(X, y)
    if sorted_rows is None:
        S = presort(X)
    else:
        S = np.array(sorted_rows, dtype=np.int64, order="C", copy=True)
        if S.ndim != 2 or S.shape[0] != X.shape[1] or S.shape[1] == 0:
            raise ValueError("sorted_rows has the wrong shape")
    if weights is None:
        weights = ClassWeights()
    feature, threshold, left, right, counts, depth = _grow(
        X, y, S, params.max_leaves, params.max_depth,
        _CRITERION_CODE[params.purity_measure], params.min_samples_leaf,
        params.min_samples_split, weights.w0, weights.w1, GAIN_TIE_TOL,
    )
    return Tree(
        feature=feature.copy(),
        threshold=threshold.copy(),
        left=left.copy(),
        right=right.copy(),
        counts=counts.copy(),
        depth=depth.copy(),
        weights=weights,
        n_features=X.shape[1],
        params=params,
    )


def predict(tree: Tree, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tree.n_features:
        raise ValueError(
            f"expected a matrix with {tree.n_features} columns, got shape {X.shape}"
        )
    node = np.zeros(len(X), dtype=np.int64)
    rows = np.arange(len(X))
    for _ in range(tree.max_depth):
        f = tree.feature[node]
        inner = f >= 0
        if not inner.any():
            break
        r = rows[inner]
        nd = node[inner]
        goes_left = X[r, f[inner]] <= tree.threshold[nd]
        node[inner] = np.where(goes_left, tree.left[nd], tree.right[nd])
    return tree.label[node]


def dump(tree: Tree, feature_names=None) -> str:
    """Indented text rendering, one node per line."""
    wc = tree.weighted_counts
    lines = []

    def name(f):
        return feature_names[f] if feature_names is not None else f"x[{f}]"

    def walk(i, indent):
        pad = "  " * indent
        cnt = f"n=({tree.counts[i, 0]}, {tree.counts[i, 1]}) w=({wc[i, 0]:.6g}, {wc[i, 1]:.6g})"
        if tree.feature[i] < 0:
            lines.append(f"{pad}leaf label={tree.label[i]} {cnt}")
            return
        lines.append(f"{pad}{name(tree.feature[i])} <= {tree.threshold[i]!r} {cnt}")
        walk(tree.left[i], indent + 1)
        walk(tree.right[i], indent + 1)

    walk(0, 0)
    return "\n".join(lines) + "\n"
