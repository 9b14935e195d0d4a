"""Binary detectors over spectral features: logistic regression and a random forest.

Label 1 means adversarial; a sample is flagged when its probability is >= 0.5.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, NumericError

DET_MAGIC = b"SSDET1"
STD_FLOOR = 1e-12


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"feature matrix {X.shape} does not match {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be 0 (clean) or 1 (adversarial)")
    if len(np.unique(y)) < 2:
        raise DataError("training data must contain both classes")
    return X, y


def _as_matrix(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != dim:
        raise DataError(f"feature dimension {x.shape[1]} does not match model dimension {dim}")
    return x, single


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=np.float64)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


# -- logistic regression ---------------------------------------------------------------

@dataclass(frozen=True)
class LogRegHyper:
    l2: float = 1e-4
    iterations: int = 500
    lr: float = 0.1


@dataclass
class LogRegModel:
    weights: np.ndarray
    bias: float
    hyper: LogRegHyper = field(default_factory=LogRegHyper)
    loss_history: tuple = ()


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logreg_loss_and_grad(w, b, Xs, y, l2):
    """Mean binary cross-entropy plus ``l2/2 * |w|^2``, with its gradient."""
    z = Xs @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w)
    r = sigmoid(z) - y
    return float(loss), Xs.T @ r / len(y) + l2 * w, float(r.mean())


def logreg_train(X, y, hyper=None):
    """Full-batch gradient descent on standardized features."""
    hyper = hyper or LogRegHyper()
    X, y = _check_xy(X, y)
    std = Standardizer.fit(X)
    Xs = std.transform(X)
    w = np.zeros(X.shape[1])
    b = 0.0
    history = []
    for it in range(hyper.iterations):
        loss, gw, gb = logreg_loss_and_grad(w, b, Xs, y, hyper.l2)
        if not np.isfinite(loss):
            raise NumericError(f"logistic regression loss became non-finite at iteration {it}")
        history.append(loss)
        w = w - hyper.lr * gw
        b = b - hyper.lr * gb
    history.append(logreg_loss_and_grad(w, b, Xs, y, hyper.l2)[0])
    return std, LogRegModel(w, b, hyper, tuple(history))


def logreg_predict(std, model, x):
    """Probability of the adversarial class for one vector or a matrix of rows."""
    x, single = _as_matrix(x, len(model.weights))
    p = sigmoid(std.transform(x) @ model.weights + model.bias)
    return float(p[0]) if single else p


@dataclass
class LogRegDetector:
    standardizer: Standardizer
    model: LogRegModel
    kind = "lr"

    @property
    def dimension(self):
        return len(self.model.weights)

    def predict_proba(self, X):
        return logreg_predict(self.standardizer, self.model, X)


# -- random forest ----------------------------------------------------------------------

@dataclass(frozen=True)
class ForestHyper:
    n_trees: int = 100
    max_features: int = 0  # 0 -> ceil(sqrt(d))
    min_samples_split: int = 2


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. ``value`` is P(adversarial)."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def leaf_probabilities(self):
        return np.stack([1.0 - self.value, self.value], axis=1)

    def predict(self, X):
        n = len(X)
        node = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return self.value[node]
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)


def _best_split_among(V, y):
    """Lowest weighted Gini over all midpoints of the columns of ``V``.

    Returns ``(column, threshold)`` or None when every column is constant.
    Ties go to the lowest column, then the lowest threshold.
    """
    n = len(y)
    order = np.argsort(V, axis=0, kind="stable")
    vs = np.take_along_axis(V, order, axis=0)
    ys = y[order]
    valid = vs[1:] > vs[:-1]
    if not valid.any():
        return None
    n1 = ys[:, 0].sum()
    left1 = np.cumsum(ys, axis=0)[:-1]
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    right1 = n1 - left1
    # n * weighted Gini of the two children
    impurity = 2.0 * left1 * (n_left - left1) / n_left + 2.0 * right1 * (n_right - right1) / n_right
    impurity = np.where(valid, impurity, np.inf)
    best = impurity.min()
    col, row = np.argwhere(impurity.T == best)[0]
    lo, hi = vs[row, col], vs[row + 1, col]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(col), float(thr)


def _grow_tree(X, y, rows, k, min_split, rng):
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(v)
        return len(feature) - 1

    d = X.shape[1]
    stack = [(new_node(), rows)]
    while stack:
        node, ids = stack.pop()
        yy = y[ids]
        n, n1 = len(ids), int(yy.sum())
        value[node] = n1 / n
        if n < min_split or n1 == 0 or n1 == n:
            continue
        perm = rng.permutation(d)
        split = None
        # the random subset comes first; further features only if it holds no usable split
        for start in range(0, d, k):
            feats = np.sort(perm[start:start + k])
            found = _best_split_among(X[np.ix_(ids, feats)], yy)
            if found is not None:
                split = (int(feats[found[0]]), found[1])
                break
        if split is None:
            continue
        f, thr = split
        mask = X[ids, f] <= thr
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, thr, lnode, rnode
        stack.append((rnode, ids[~mask]))
        stack.append((lnode, ids[mask]))
    return Tree(np.array(feature, np.int32), np.array(threshold, np.float64),
                np.array(left, np.int32), np.array(right, np.int32), np.array(value, np.float64))


@dataclass
class ForestModel:
    trees: list
    n_features: int
    hyper: ForestHyper = field(default_factory=ForestHyper)
    seed: int = 0
    kind = "rf"

    @property
    def dimension(self):
        return self.n_features

    def predict_proba(self, X):
        return forest_predict(self, X)


def forest_train(X, y, hyper=None, seed=0):
    """Bagged CART trees (Gini, random feature subsets), grown until pure."""
    hyper = hyper or ForestHyper()
    X, y = _check_xy(X, y)
    n, d = X.shape
    k = hyper.max_features or math.ceil(math.sqrt(d))
    k = min(max(1, k), d)
    trees = []
    for t in range(hyper.n_trees):
        rng = np.random.default_rng([int(seed), t])
        rows = rng.integers(0, n, size=n)
        trees.append(_grow_tree(X, y, rows, k, hyper.min_samples_split, rng))
    return ForestModel(trees, d, hyper, int(seed))


def forest_predict(model, x):
    """Mean leaf probability over trees; summed in sorted order so tree order is irrelevant."""
    x, single = _as_matrix(x, model.n_features)
    per_tree = np.sort(np.stack([t.predict(x) for t in model.trees]), axis=0)
    p = per_tree.sum(axis=0) / len(model.trees)
    return float(p[0]) if single else p


# -- common front end and serialization ----------------------------------------------------

DETECTOR_KINDS = ("lr", "rf")


def train_detector(kind, X, y, seed=0, lr_hyper=None, rf_hyper=None):
    if kind == "lr":
        std, model = logreg_train(X, y, lr_hyper)
        return LogRegDetector(std, model)
    if kind == "rf":
        return forest_train(X, y, rf_hyper, seed)
    raise DataError(f"unknown detector kind '{kind}'; choose from {DETECTOR_KINDS}")


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i32(a):
    return np.ascontiguousarray(a, dtype="<i4").tobytes()


def _blob(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def dumps_detector(det):
    if isinstance(det, LogRegDetector):
        hyper = json.dumps(asdict(det.model.hyper), sort_keys=True)
        d = det.dimension
        body = (struct.pack("<I", d) + _f64(det.standardizer.mean) + _f64(det.standardizer.std)
                + _f64(det.model.weights) + struct.pack("<d", det.model.bias))
        return DET_MAGIC + _blob("lr") + _blob(hyper) + body
    if isinstance(det, ForestModel):
        hyper = json.dumps(dict(asdict(det.hyper), seed=det.seed), sort_keys=True)
        parts = [struct.pack("<II", det.n_features, len(det.trees))]
        for t in det.trees:
            parts += [struct.pack("<I", len(t.feature)), _i32(t.feature), _f64(t.threshold),
                      _i32(t.left), _i32(t.right), _f64(t.value)]
        return DET_MAGIC + _blob("rf") + _blob(hyper) + b"".join(parts)
    raise DataError(f"cannot serialize {type(det).__name__}")


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, fmt):
        s = struct.Struct(fmt)
        out = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return out

    def text(self):
        (n,) = self.take("<I")
        out = self.data[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return out

    def array(self, dtype, count):
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += out.nbytes
        return out


def loads_detector(data):
    if data[:6] != DET_MAGIC:
        raise DataError("not a detector file (bad magic)")
    r = _Reader(data)
    r.pos = 6
    try:
        kind = r.text()
        hyper = json.loads(r.text())
        if kind == "lr":
            (d,) = r.take("<I")
            mean, std, w = r.array("<f8", d), r.array("<f8", d), r.array("<f8", d)
            (b,) = r.take("<d")
            det = LogRegDetector(Standardizer(mean, std), LogRegModel(w, b, LogRegHyper(**hyper)))
        elif kind == "rf":
            seed = hyper.pop("seed")
            n_features, n_trees = r.take("<II")
            trees = []
            for _ in range(n_trees):
                (m,) = r.take("<I")
                trees.append(Tree(r.array("<i4", m).astype(np.int32), r.array("<f8", m),
                                  r.array("<i4", m).astype(np.int32), r.array("<i4", m).astype(np.int32),
                                  r.array("<f8", m)))
            det = ForestModel(trees, n_features, ForestHyper(**hyper), seed)
        else:
            raise DataError(f"unknown detector kind tag '{kind}'")
    except (struct.error, ValueError) as exc:
        raise DataError(f"corrupt detector file: {exc}") from exc
    if r.pos != len(data):
        raise DataError("trailing bytes in detector file")
    return det


def save_detector(path, det):
    with open(path, "wb") as f:
        f.write(dumps_detector(det))


def load_detector(path):
    with open(path, "rb") as f:
        return loads_detector(f.read())
