"""Classical comparison classifiers on flattened preprocessed sequences.

All three work on plain (n, p) float matrices with integer class codes, so they
are usable outside the skeleton pipeline as well. Ties are always broken toward
the lowest class code.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .skeleton import Label, MotionSequence, N_JOINTS

N_CLASSES = len(Label)


class FeatureVector(NamedTuple):
    values: np.ndarray
    label: int


def flatten(seq: MotionSequence) -> FeatureVector:
    """Frame-major concatenation of all joint coordinates, length T * 60."""
    return FeatureVector(seq.coords.reshape(-1).copy(), int(seq.label))


def unflatten(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size % (N_JOINTS * 3):
        raise ValueError(f"length {values.size} is not a whole number of {N_JOINTS * 3}-channel frames")
    return values.reshape(-1, N_JOINTS, 3)


def feature_matrix(seqs: Sequence[MotionSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack flattened sequences into X (n, T*60) and labels y (n,)."""
    if not seqs:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise ValueError(f"sequences must share one length to be flattened together, got {sorted(lengths)}")
    X = np.stack([s.coords.reshape(-1) for s in seqs])
    y = np.array([int(s.label) for s in seqs], dtype=np.int64)
    return X, y


def _vote(labels: np.ndarray, n_classes: int) -> int:
    return int(np.argmax(np.bincount(labels, minlength=n_classes)))


def _as_xy(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (len(X),):
        raise ValueError(f"{len(X)} samples but {y.shape} labels")
    if len(y) and y.min() < 0:
        raise ValueError("class codes must be non-negative")
    return X, y


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class SVMConfig:
    C: float = 1.0
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.C <= 0 or self.epochs < 1:
            raise ValueError("svm needs C > 0 and epochs >= 1")


@dataclass(frozen=True)
class RFConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: str | int = "sqrt"
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1:
            raise ValueError("rf needs n_trees >= 1, max_depth >= 0, min_leaf >= 1")
        if self.features_per_split != "sqrt" and int(self.features_per_split) < 1:
            raise ValueError("features_per_split must be 'sqrt' or a positive integer")

    def n_features(self, p: int) -> int:
        if self.features_per_split == "sqrt":
            return max(1, math.ceil(math.sqrt(p)))
        return min(p, int(self.features_per_split))


@dataclass(frozen=True)
class BaselineConfig:
    knn_k: int = 5
    svm: SVMConfig = field(default_factory=SVMConfig)
    rf: RFConfig = field(default_factory=RFConfig)

    def __post_init__(self):
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        d = dict(d)
        svm = SVMConfig(**d.pop("svm", {}))
        rf = RFConfig(**d.pop("rf", {}))
        return cls(svm=svm, rf=rf, **d)

    def with_seed(self, seed: int) -> "BaselineConfig":
        return BaselineConfig(self.knn_k, SVMConfig(self.svm.C, self.svm.epochs, seed),
                              RFConfig(**dict(asdict(self.rf), seed=seed)))


# -- k nearest neighbours ---------------------------------------------------

@dataclass
class KNNClassifier:
    X: np.ndarray
    y: np.ndarray
    k: int = 5
    n_classes: int = N_CLASSES
    kind: str = "knn"

    def neighbours(self, Q: np.ndarray, block: int = 16) -> np.ndarray:
        """Indices of the k nearest training rows per query, nearest first.
        Equal distances keep training order."""
        Q = _as_xy(np.atleast_2d(Q))
        out = np.empty((len(Q), self.k), dtype=np.int64)
        for s in range(0, len(Q), block):
            diff = self.X[None, :, :] - Q[s:s + block, None, :]
            d2 = np.einsum("qnp,qnp->qn", diff, diff)
            out[s:s + block] = np.argsort(d2, axis=1, kind="stable")[:, :self.k]
        return out

    def predict(self, Q) -> np.ndarray:
        nb = self.neighbours(Q)
        return np.array([_vote(self.y[row], self.n_classes) for row in nb], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "n_classes": self.n_classes,
                "X": self.X.tolist(), "y": self.y.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "KNNClassifier":
        return cls(np.asarray(d["X"], dtype=np.float64), np.asarray(d["y"], dtype=np.int64),
                   int(d["k"]), int(d["n_classes"]))


def knn_fit(X, y, k: int = 5, n_classes: int | None = None) -> KNNClassifier:
    X, y = _as_xy(X, y)
    if len(X) == 0:
        raise ValueError("knn needs a non-empty training set")
    if not 1 <= k <= len(X):
        raise ValueError(f"k={k} must lie in [1, {len(X)}]")
    n_classes = max(n_classes or N_CLASSES, int(y.max()) + 1)
    return KNNClassifier(X.copy(), y.copy(), k, n_classes)


def knn_classify(X, y, query, k: int = 5) -> int:
    """Label of a single query by majority vote over its k nearest training rows."""
    return int(knn_fit(X, y, k).predict(np.asarray(query)[None])[0])


# -- linear SVM -------------------------------------------------------------

@dataclass
class LinearSVM:
    """One-vs-rest linear SVM; ``W[:, -1]`` is the bias column."""
    W: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    kind: str = "svm"

    def _augment(self, X):
        Z = (_as_xy(np.atleast_2d(X)) - self.mean) / self.scale
        return np.hstack([Z, np.ones((len(Z), 1))])

    def decision_function(self, X) -> np.ndarray:
        return self._augment(X) @ self.W.T

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "W": self.W.tolist(), "mean": self.mean.tolist(),
                "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSVM":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("W", "mean", "scale")))


def svm_train(X, y, cfg: SVMConfig | None = None, n_classes: int | None = None) -> LinearSVM:
    """Pegasos: stochastic subgradient descent on the L2-regularized hinge loss,
    one binary problem per class, lambda = 1 / (C n), step 1 / (lambda t)."""
    cfg = cfg or SVMConfig()
    X, y = _as_xy(X, y)
    if len(np.unique(y)) < 2:
        raise ValueError("svm needs at least two classes in the training set")
    n_classes = max(n_classes or N_CLASSES, int(y.max()) + 1)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = np.hstack([(X - mean) / scale, np.ones((len(X), 1))])
    n = len(Z)
    lam = 1.0 / (cfg.C * n)
    # targets: +1 for the row's own class, -1 elsewhere; all problems share the sample order
    Y = np.where(y[:, None] == np.arange(n_classes), 1.0, -1.0)
    W = np.zeros((n_classes, Z.shape[1]))
    rng = np.random.default_rng(cfg.seed)
    t = 0
    for _ in range(cfg.epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            yi = Y[i]
            viol = yi * (W @ Z[i]) < 1.0
            W *= 1.0 - eta * lam
            if viol.any():
                W[viol] += (eta * yi[viol])[:, None] * Z[i]
    return LinearSVM(W, mean, scale)


# -- random forest ----------------------------------------------------------

def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


assert gini([5, 0]) == 0.0 and gini([3, 3]) == 0.5


@dataclass
class DecisionTree:
    """Array form: node i splits on ``feature[i] <= threshold[i]`` (left) unless
    ``feature[i] == -1``, in which case it is a leaf predicting ``value[i]``."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X) -> np.ndarray:
        X = _as_xy(np.atleast_2d(X))
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            r, n_, ff = rows[inner], node[inner], f[inner]
            go_left = X[r, ff] <= self.threshold[n_]
            node[inner] = np.where(go_left, self.left[n_], self.right[n_])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.int64))


def best_split(X, y, features, n_classes: int, min_leaf: int = 1):
    """Lowest weighted Gini over the candidate features and midpoint thresholds.

    Returns (feature, threshold, impurity) or None if no split leaves at least
    ``min_leaf`` rows on each side. Ties go to the earlier candidate feature,
    then the smaller threshold.
    """
    n = len(y)
    if n < 2 * min_leaf:
        return None
    V = X[:, features]
    order = np.argsort(V, axis=0, kind="stable")
    Vs = np.take_along_axis(V, order, axis=0)
    onehot = np.eye(n_classes)[y]
    left = np.cumsum(onehot[order], axis=0)[:-1]          # (n-1, f, K): rows 0..i on the left
    total = onehot.sum(axis=0)
    right = total - left
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    g_left = 1.0 - np.sum(left * left, axis=2) / (n_left * n_left)
    g_right = 1.0 - np.sum(right * right, axis=2) / (n_right * n_right)
    score = (n_left * g_left + n_right * g_right) / n
    valid = (Vs[1:] > Vs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    score = np.where(valid, score, np.inf)
    pos, col = np.unravel_index(np.argmin(score.T), score.T.shape)[::-1]
    thr = 0.5 * (Vs[pos, col] + Vs[pos + 1, col])
    # the midpoint of two adjacent doubles can round onto the upper one
    if not thr < Vs[pos + 1, col]:
        thr = Vs[pos, col]
    return int(features[col]), float(thr), float(score[pos, col])


def tree_train(X, y, max_depth: int = 12, min_leaf: int = 2, n_features: int | None = None,
               rng: np.random.Generator | None = None, n_classes: int | None = None) -> DecisionTree:
    X, y = _as_xy(X, y)
    if len(X) == 0:
        raise ValueError("cannot grow a tree on an empty training set")
    p = X.shape[1]
    n_features = p if n_features is None else min(p, n_features)
    n_classes = max(n_classes or N_CLASSES, int(y.max()) + 1)
    rng = rng or np.random.default_rng(0)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(_vote(y[idx], n_classes))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yi = y[idx]
        if depth >= max_depth or np.all(yi == yi[0]):
            continue
        feats = np.sort(rng.choice(p, size=n_features, replace=False)) if n_features < p else np.arange(p)
        split = best_split(X[idx], yi, feats, n_classes, min_leaf)
        if split is None:
            continue
        f, thr, _ = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(li), new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(value, dtype=np.int64))


@dataclass
class RandomForest:
    trees: list[DecisionTree]
    n_classes: int = N_CLASSES
    kind: str = "rf"

    def predict(self, X) -> np.ndarray:
        votes = np.stack([t.predict(X) for t in self.trees], axis=1)
        return np.array([_vote(v, self.n_classes) for v in votes], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_classes": self.n_classes, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomForest":
        return cls([DecisionTree.from_dict(t) for t in d["trees"]], int(d["n_classes"]))


def rf_train(X, y, cfg: RFConfig | None = None, n_classes: int | None = None) -> RandomForest:
    """Bagged Gini trees with a random feature subset per split. Tree k draws
    from the k-th child of ``SeedSequence(cfg.seed)``, so results do not depend
    on the order trees are grown in."""
    cfg = cfg or RFConfig()
    X, y = _as_xy(X, y)
    if len(X) == 0:
        raise ValueError("rf needs a non-empty training set")
    n_classes = max(n_classes or N_CLASSES, int(y.max()) + 1)
    m = cfg.n_features(X.shape[1])
    trees = []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, len(X), size=len(X)) if cfg.bootstrap else np.arange(len(X))
        trees.append(tree_train(X[idx], y[idx], cfg.max_depth, cfg.min_leaf, m, rng, n_classes))
    return RandomForest(trees, n_classes)


# -- serialization ----------------------------------------------------------

_KINDS = {"knn": KNNClassifier, "svm": LinearSVM, "rf": RandomForest}


def save_baseline(model, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model.to_dict()))
    return path


def load_baseline(path):
    d = json.loads(Path(path).read_text())
    try:
        return _KINDS[d["kind"]].from_dict(d)
    except KeyError as exc:
        raise ValueError(f"{path}: not a baseline model file ({exc})") from None


def fit_baseline(name: str, X, y, cfg: BaselineConfig | None = None):
    cfg = cfg or BaselineConfig()
    if name == "knn":
        return knn_fit(X, y, cfg.knn_k)
    if name == "svm":
        return svm_train(X, y, cfg.svm)
    if name == "rf":
        return rf_train(X, y, cfg.rf)
    raise ValueError(f"unknown baseline {name!r}")
