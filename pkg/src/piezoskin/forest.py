"""Random forest classifier (Gini splits, bootstrap, per-node feature subsets).

Trees are stored as flat node arrays.  For prediction all trees of a
forest are packed into one set of arrays and walked together, which keeps
both batch and single-row prediction cheap.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = ["ForestParams", "Tree", "ForestModel", "grow_tree", "train_forest", "gini",
           "FORMAT_VERSION"]

FORMAT_NAME = "piezoskin.forest"
FORMAT_VERSION = 1


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    max_features: int | None = None  # None -> ceil(sqrt(K))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("n_trees, max_depth and min_leaf must be >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1")


@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray  # go left when x[feature] <= threshold
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes) training class counts

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def leaf_class(self) -> np.ndarray:
        return np.argmax(self.counts, axis=1)

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.feature[node] >= 0:
                stack += [(self.left[node], d + 1), (self.right[node], d + 1)]
        return best

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                break
            x = X[rows, np.where(inner, feat, 0)]
            nxt = np.where(x <= self.threshold[node], self.left[node], self.right[node])
            node = np.where(inner, nxt, node)
        return self.leaf_class[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=float),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            counts=np.asarray(d["counts"], dtype=np.int64).reshape(len(d["feature"]), -1),
        )


def _best_split(X, y, idx, features, n_classes, min_leaf):
    """Exhaustive Gini search over ``features`` for the rows ``idx``.

    Returns ``(impurity, feature, threshold)`` or ``None``.  Thresholds are
    midpoints between adjacent distinct values; ties keep the first feature
    in ``features`` and the lowest threshold.
    """
    n = len(idx)
    pos = np.arange(1, n)
    valid_size = (pos >= min_leaf) & (n - pos >= min_leaf)
    if not valid_size.any():
        return None
    yi = y[idx]
    n_right = n - pos
    eye = np.eye(n_classes) if n_classes > 2 else None
    total1 = yi.sum() if n_classes == 2 else None
    best = None
    for f in features:
        x = X[idx, f]
        order = np.argsort(x)
        xs = x[order]
        valid = valid_size & (xs[1:] > xs[:-1])
        if not valid.any():
            continue
        ys = yi[order]
        # weighted child impurity = 1 - purity / n, purity = sum_c l_c^2/n_l + r_c^2/n_r
        if eye is None:
            l1 = np.cumsum(ys)[:-1]
            l0 = pos - l1
            r1 = total1 - l1
            r0 = n_right - r1
            purity = (l0 * l0 + l1 * l1) / pos + (r0 * r0 + r1 * r1) / n_right
        else:
            left = np.cumsum(eye[ys], axis=0)
            total = left[-1]
            left = left[:-1]
            right = total - left
            purity = (left * left).sum(axis=1) / pos + (right * right).sum(axis=1) / n_right
        purity = np.where(valid, purity, -np.inf)
        # exact ties differ only by rounding; take the first within a tolerance
        tol = 1e-9 * n
        i = int(np.argmax(purity >= purity.max() - tol))
        score = 1.0 - float(purity[i]) / n
        if best is None or score < best[0] - tol / n:
            best = (score, int(f), 0.5 * (xs[i] + xs[i + 1]))
    return best


def grow_tree(X, y, n_classes: int, max_depth: int = 12, min_leaf: int = 2,
              max_features: int | None = None, rng=None) -> Tree:
    """Grow one CART tree on all rows of ``X`` (no resampling here)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    k = X.shape[1]
    mtry = k if max_features is None else min(max_features, k)
    rng = rng if rng is not None else np.random.default_rng(0)

    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        c = counts[node]
        if depth >= max_depth or len(idx) < 2 * min_leaf or (c > 0).sum() <= 1:
            continue
        feats = rng.choice(k, size=mtry, replace=False) if mtry < k else np.arange(k)
        split = _best_split(X, y, idx, feats, n_classes, min_leaf)
        if split is None:
            continue
        _, f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # depth-first, left subtree expanded first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        counts=np.asarray(counts, dtype=np.int64).reshape(len(feature), n_classes),
    )


@dataclass
class ForestModel:
    trees: list
    n_classes: int
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)
    label_names: list | None = None

    def __post_init__(self):
        self._pack()

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def _pack(self):
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees[:-1]])
        self._roots = offsets.astype(np.int64)
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._left = np.concatenate([t.left + o for t, o in zip(self.trees, offsets)])
        self._right = np.concatenate([t.right + o for t, o in zip(self.trees, offsets)])
        self._leaf = np.concatenate([t.leaf_class for t in self.trees])

    def votes(self, X) -> np.ndarray:
        """Per-class tree vote counts, shape ``(N, n_classes)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        n = len(X)
        node = np.broadcast_to(self._roots, (n, self.n_trees)).copy()
        rows = np.arange(n)[:, None]
        while True:
            feat = self._feature[node]
            inner = feat >= 0
            if not inner.any():
                break
            x = X[rows, np.where(inner, feat, 0)]
            nxt = np.where(x <= self._threshold[node], self._left[node], self._right[node])
            node = np.where(inner, nxt, node)
        leaf = self._leaf[node]
        return np.stack([(leaf == c).sum(axis=1) for c in range(self.n_classes)], axis=1)

    def predict(self, X) -> np.ndarray:
        """Majority vote; ties go to the lowest class id."""
        return np.argmax(self.votes(X), axis=1)

    def predict_one(self, x) -> int:
        return int(self.predict(np.asarray(x, dtype=float)[None, :])[0])

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "label_names": self.label_names,
            "params": asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> ForestModel:
        if d.get("format") != FORMAT_NAME:
            raise ValueError("not a forest model document")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported forest format version {d.get('version')}")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            n_classes=int(d["n_classes"]),
            n_features=int(d["n_features"]),
            params=ForestParams(**d["params"]),
            label_names=d.get("label_names"),
        )

    @classmethod
    def loads(cls, text: str) -> ForestModel:
        return cls.from_dict(json.loads(text))


def train_forest(X, y, params: ForestParams = ForestParams(), n_classes: int | None = None,
                 label_names=None) -> ForestModel:
    """Fit a forest. Each tree draws from its own stream seeded by
    ``(params.seed, tree_index)``, so results do not depend on build order.

    Data with a single class yields trees that are single leaves, i.e. a
    model that always predicts that class.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("X must be (N, K) with N == len(y) >= 1")
    if n_classes is None:
        n_classes = len(label_names) if label_names is not None else int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("labels out of range")
    k = X.shape[1]
    mtry = params.max_features or math.ceil(math.sqrt(k))
    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng([params.seed, t])
        rows = rng.integers(0, len(y), len(y)) if params.bootstrap else np.arange(len(y))
        trees.append(grow_tree(X[rows], y[rows], n_classes, params.max_depth,
                               params.min_leaf, mtry, rng))
    return ForestModel(trees, n_classes, k, params,
                       list(label_names) if label_names is not None else None)
