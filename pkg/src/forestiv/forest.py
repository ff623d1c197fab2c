"""CART trees and random forests exposing per-tree predictions.

Trees are stored as flat node arrays. A node with ``feature == -1`` is a
leaf; otherwise rows with ``x[feature] < threshold`` go to ``left``.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

FOREST_FORMAT = "forestiv-forest"
FOREST_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    mtry: int | None = None
    min_node: int | None = None
    task: str = "regression"
    bootstrap: bool = True

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"task must be regression or classification, got {self.task!r}")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.min_node is not None and self.min_node < 1:
            raise ValueError("min_node must be >= 1")

    def resolve(self, p):
        """Fill in Breiman's defaults for a problem with ``p`` features."""
        if p < 1:
            raise ValueError("need at least one feature")
        classify = self.task == "classification"
        mtry = self.mtry
        if mtry is None:
            mtry = max(1, int(np.sqrt(p))) if classify else max(1, p // 3)
        if mtry > p:
            raise ValueError(f"mtry={mtry} exceeds the number of features {p}")
        min_node = self.min_node if self.min_node is not None else (1 if classify else 5)
        return ForestParams(self.n_trees, mtry, min_node, self.task, self.bootstrap)


@dataclass(frozen=True, eq=False)
class TreeModel:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_node: np.ndarray
    counts: np.ndarray | None = None  # (n_nodes, 2) class counts, classification only

    @property
    def n_nodes(self):
        return self.feature.shape[0]

    def leaves(self):
        return np.flatnonzero(self.feature < 0)

    def to_dict(self):
        d = {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_node": self.n_node.tolist(),
        }
        if self.counts is not None:
            d["counts"] = self.counts.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        counts = d.get("counts")
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
            np.asarray(d["n_node"], dtype=np.int64),
            None if counts is None else np.asarray(counts, dtype=np.int64).reshape(-1, 2),
        )


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    params: ForestParams
    n_features: int
    train_metric: dict = field(default_factory=dict)

    @property
    def n_trees(self):
        return len(self.trees)

    @property
    def classification(self):
        return self.params.task == "classification"

    def to_json(self):
        doc = {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "params": asdict(self.params),
            "n_features": self.n_features,
            "train_metric": self.train_metric,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != FOREST_FORMAT:
            raise ValueError("not a serialized forest")
        if doc.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported forest version {doc.get('version')}")
        return cls(
            tuple(TreeModel.from_dict(t) for t in doc["trees"]),
            ForestParams(**doc["params"]),
            int(doc["n_features"]),
            doc.get("train_metric", {}),
        )


# ---------------------------------------------------------------- kernels


@njit(cache=True, nogil=True)
def _grow(X, y, rows, mtry, min_node, classify, seed):
    np.random.seed(seed)
    n = rows.shape[0]
    p = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    value = np.zeros(cap)
    n_node = np.zeros(cap, np.int64)
    counts = np.zeros((cap, 2), np.int64)

    idx = rows.copy()
    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    top = 1
    n_nodes = 1
    feats = np.arange(p)
    xs = np.empty(n)
    ys = np.empty(n)

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        size = hi - lo

        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        c1 = 0
        for k in range(lo, hi):
            v = y[idx[k]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
            if v > 0.5:
                c1 += 1
        c0 = size - c1
        n_node[node] = size
        if classify:
            counts[node, 0] = c0
            counts[node, 1] = c1
            value[node] = 1.0 if c1 > c0 else 0.0
        else:
            value[node] = s / size
        if size < 2 * min_node or ymax <= ymin:
            continue

        if classify:
            parent = (c0 * c0 + c1 * c1) / size
        else:
            parent = s * s / size
        tol = 1e-12 * max(abs(parent), 1e-300)
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        visited = 0
        k = 0
        while k < p and visited < mtry:
            j = np.random.randint(k, p)
            f = feats[j]
            feats[j] = feats[k]
            feats[k] = f
            k += 1
            xmin = np.inf
            xmax = -np.inf
            for t in range(size):
                v = X[idx[lo + t], f]
                xs[t] = v
                ys[t] = y[idx[lo + t]]
                if v < xmin:
                    xmin = v
                if v > xmax:
                    xmax = v
            if xmax <= xmin:
                continue
            visited += 1
            order = np.argsort(xs[:size], kind="mergesort")
            sl = 0.0
            l1 = 0
            for t in range(size - 1):
                o = order[t]
                sl += ys[o]
                if ys[o] > 0.5:
                    l1 += 1
                nl = t + 1
                nr = size - nl
                if nl < min_node:
                    continue
                if nr < min_node:
                    break
                a = xs[o]
                b = xs[order[t + 1]]
                if a == b:
                    continue
                if classify:
                    l0 = nl - l1
                    r1 = c1 - l1
                    r0 = nr - r1
                    score = (l0 * l0 + l1 * l1) / nl + (r0 * r0 + r1 * r1) / nr
                else:
                    sr = s - sl
                    score = sl * sl / nl + sr * sr / nr
                gain = score - parent
                if gain > best_gain + tol:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (a + b)
                    if thr <= a:
                        thr = b
                    best_thr = thr
        if best_f < 0:
            continue

        i = lo
        j = hi - 1
        while i <= j:
            if X[idx[i], best_f] < best_thr:
                i += 1
            else:
                tmp = idx[i]
                idx[i] = idx[j]
                idx[j] = tmp
                j -= 1
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = n_nodes
        right[node] = n_nodes + 1
        st_node[top] = n_nodes + 1
        st_lo[top] = i
        st_hi[top] = hi
        top += 1
        st_node[top] = n_nodes
        st_lo[top] = lo
        st_hi[top] = i
        top += 1
        n_nodes += 2

    m = n_nodes
    return (feature[:m].copy(), threshold[:m].copy(), left[:m].copy(), right[:m].copy(),
            value[:m].copy(), n_node[:m].copy(), counts[:m].copy())


@njit(cache=True, nogil=True)
def _predict_packed(feature, threshold, left, right, value, X):
    # feature etc. are (n_trees, max_nodes) padded arrays
    n = X.shape[0]
    M = feature.shape[0]
    out = np.empty((n, M))
    for t in range(M):
        for r in range(n):
            node = 0
            while feature[t, node] >= 0:
                if X[r, feature[t, node]] < threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[r, t] = value[t, node]
    return out


# ---------------------------------------------------------------- fitting


def _check_rows(X, p):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :] if p > 1 else X[:, None]
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"dimension mismatch: forest expects {p} features, got shape {X.shape}")
    return np.ascontiguousarray(X)


def _grow_one(X, y, params, seq):
    rng = np.random.default_rng(seq)
    n = X.shape[0]
    rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
    kernel_seed = int(rng.integers(0, 2**31 - 1))
    parts = _grow(X, y, rows.astype(np.int64), params.mtry, params.min_node,
                  params.task == "classification", kernel_seed)
    f, thr, lt, rt, val, nn, cnt = parts
    return TreeModel(f, thr, lt, rt, val, nn, cnt if params.task == "classification" else None)


def grow_forest(X, y, params=None, seed=0, threads=1):
    """Fit a random forest on arrays ``X`` (n x p) and ``y`` (n,).

    Each tree draws its own RNG stream from ``SeedSequence(seed).spawn``, so
    the result is the same for any ``threads`` value.
    """
    params = params or ForestParams()
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("p=0: need at least one feature")
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64).ravel())
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y have different numbers of rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("training truth contains non-finite values")
    params = params.resolve(X.shape[1])
    if params.task == "classification":
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("classification truth must be in {0, 1}")
        if np.unique(y).size < 2:
            raise ValueError("classification with a single class present")

    seqs = np.random.SeedSequence(seed).spawn(params.n_trees)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            trees = list(ex.map(lambda s: _grow_one(X, y, params, s), seqs))
    else:
        trees = [_grow_one(X, y, params, s) for s in seqs]

    forest = ForestModel(tuple(trees), params, X.shape[1])
    pred = predict_forest(forest, X)
    if params.task == "classification":
        metric = {"accuracy": float(np.mean(pred == y))}
    else:
        metric = {"rmse": float(np.sqrt(np.mean((pred - y) ** 2)))}
    return ForestModel(forest.trees, params, X.shape[1], metric)


def fit_forest(d, params=None, seed=0, threads=1):
    """Fit a forest on the ``train`` rows of a :class:`~forestiv.data.Dataset`."""
    rows = d.rows("train")
    if rows.size == 0:
        raise ValueError("empty training set")
    return grow_forest(d.features[rows], d.truth[rows], params, seed, threads)


def _packed(forest):
    cache = forest.__dict__.get("_packed")
    if cache is None:
        M = forest.n_trees
        width = max(t.n_nodes for t in forest.trees)
        feature = np.full((M, width), -1, np.int64)
        threshold = np.zeros((M, width))
        left = np.zeros((M, width), np.int64)
        right = np.zeros((M, width), np.int64)
        value = np.zeros((M, width))
        for k, t in enumerate(forest.trees):
            m = t.n_nodes
            feature[k, :m] = t.feature
            threshold[k, :m] = t.threshold
            left[k, :m] = t.left
            right[k, :m] = t.right
            value[k, :m] = t.value
        cache = (feature, threshold, left, right, value)
        object.__setattr__(forest, "_packed", cache)
    return cache


def predict_tree(tree, X):
    """Leaf mean (regression) or leaf-majority label (classification)."""
    p = int(tree.feature.max()) + 1 if tree.n_nodes > 1 else None
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None] if p in (None, 1) else X[None, :]
    if p is not None and X.shape[1] < p:
        raise ValueError(f"dimension mismatch: tree splits on feature {p - 1}, got {X.shape[1]} columns")
    X = np.ascontiguousarray(X)
    out = _predict_packed(tree.feature[None], tree.threshold[None], tree.left[None],
                          tree.right[None], tree.value[None], X)
    return out[:, 0]


def tree_prediction_matrix(forest, X):
    """n x M matrix whose column ``i`` is tree ``i``'s prediction."""
    X = _check_rows(X, forest.n_features)
    return _predict_packed(*_packed(forest), X)


def predict_forest(forest, X):
    """Mean of tree predictions, or majority vote with ties going to class 0."""
    P = tree_prediction_matrix(forest, X)
    if forest.classification:
        votes = P.sum(axis=1)
        return (votes > forest.n_trees / 2).astype(np.float64)
    return P.mean(axis=1)
