"""Downstream binary classifiers: logistic regression, random forest, gradient boosting.

Trees are CART regression trees grown level by level.  Candidate thresholds
are midpoints between consecutive distinct training values of a feature
(thinned to ``max_bins`` quantiles when there are more), so every split
search at a tree level is one ``bincount`` over (node, feature, bin) slots,
where each feature owns as many slots as it has distinct binned values.  For
0/1 targets the squared-error reduction used here is proportional to the
Gini decrease, so the same grower serves the forest (class probabilities in
the leaves) and boosting (Newton steps on log-loss gradients in the leaves).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit


def _check_xy(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if y is None:
        return X
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ValueError(f"y shape {y.shape} does not match {X.shape[0]} rows")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    if np.unique(y).size < 2:
        raise ValueError("need samples of both classes")
    return X, y.astype(np.float64)


def _log_loss(y, p):
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


# logistic regression


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    n_iter: int = 0

    def predict_proba(self, X) -> np.ndarray:
        return expit(_check_xy(X) @ self.weights + self.bias)

    def to_dict(self) -> dict:
        return {"kind": "lr", "weights": self.weights.tolist(), "bias": self.bias}


def _lr_objective(theta, Xa, y, reg):
    z = Xa @ theta
    # mean log-loss written stably as mean(log(1 + e^z) - y z)
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.dot(reg * theta, theta)
    grad = Xa.T @ (expit(z) - y) / y.size + reg * theta
    return loss, grad


def lr_fit(X, y, l2: float = 1.0, epochs: int = 1000, lr: float | None = None, tol: float = 1e-10) -> LogisticModel:
    """Minimise ``mean log-loss + l2 / (2n) * |w|^2`` (bias unpenalised).

    With ``lr=None`` the objective is minimised by L-BFGS (scipy) for at most
    ``epochs`` iterations.  Passing ``lr`` runs plain full-batch gradient
    descent with that step for ``epochs`` steps instead.
    """
    X, y = _check_xy(X, y)
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    reg = np.full(d + 1, l2 / n)
    reg[-1] = 0.0
    theta = np.zeros(d + 1)
    if lr is None:
        res = minimize(_lr_objective, theta, args=(Xa, y, reg), jac=True, method="L-BFGS-B",
                       options={"maxiter": epochs, "gtol": tol, "ftol": 0.0})
        theta, it = res.x, int(res.nit)
    else:
        if lr <= 0:
            raise ValueError("lr must be positive")
        it = 0
        for it in range(1, epochs + 1):
            _, grad = _lr_objective(theta, Xa, y, reg)
            theta = theta - lr * grad
            if np.linalg.norm(grad) < tol:
                break
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("logistic regression diverged")
    return LogisticModel(theta[:-1].copy(), float(theta[-1]), it)


def lr_predict_proba(model: LogisticModel, X) -> np.ndarray:
    return model.predict_proba(X)


# trees


class Binner:
    """Per-feature thresholds from training values; ``bin = #thresholds < x``."""

    def __init__(self, X: np.ndarray, max_bins: int = 255):
        self.edges = []
        for j in range(X.shape[1]):
            u = np.unique(X[:, j])
            mids = (u[:-1] + u[1:]) / 2.0
            if mids.size > max_bins - 1:
                pick = np.unique(np.linspace(0, mids.size - 1, max_bins - 1).round().astype(int))
                mids = mids[pick]
            self.edges.append(mids)
        self.sizes = np.array([e.size + 1 for e in self.edges], dtype=np.int64)

    def transform(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape, dtype=np.int32)
        for j, e in enumerate(self.edges):
            out[:, j] = np.searchsorted(e, X[:, j], side="left")
        return out


@dataclass
class DecisionTree:
    """Array-encoded binary tree; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r = rows[inner]
            go_left = X[r, f[inner]] <= self.threshold[node[inner]]
            node[r] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def structure(self) -> tuple:
        return tuple(self.feature.tolist()), tuple(self.left.tolist()), tuple(self.right.tolist())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64))


def grow_tree(Xb: np.ndarray, binner: Binner, target: np.ndarray, leaf_value, max_depth: int | None,
              sample_weight: np.ndarray | None = None, n_features: int | None = None,
              rng: np.random.Generator | None = None, min_samples_leaf: int = 1) -> DecisionTree:
    """Grow a squared-error CART tree on pre-binned features.

    ``leaf_value(idx, w)`` maps the training rows in a leaf (and their
    weights) to the leaf output.  With ``n_features`` a fresh random subset
    of that many features is searched at every node.  Ties between equally
    good splits go to the lowest feature index, then the lowest threshold.
    """
    n, d = Xb.shape
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    rows = np.flatnonzero(w > 0)
    sizes = binner.sizes
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst in (feature, left, right):
            lst.append(-1)
        threshold.append(0.0)
        value.append(0.0)
        return len(feature) - 1

    root = new_node()
    frontier = [(root, rows)]
    depth = 0
    while frontier:
        splittable = []
        for node, idx in frontier:
            if (max_depth is not None and depth >= max_depth) or idx.size < 2 * min_samples_leaf \
                    or np.ptp(target[idx]) == 0.0:
                value[node] = leaf_value(idx, w[idx])
            else:
                splittable.append((node, idx))
        if not splittable:
            break
        m = len(splittable)
        k = d if n_features is None else min(d, n_features)
        if k == d:
            feats = np.broadcast_to(np.arange(d), (m, d))
        else:
            feats = np.sort(np.argsort(rng.random((m, d)), axis=1)[:, :k], axis=1)
        owner = np.concatenate([np.full(idx.size, i) for i, (_, idx) in enumerate(splittable)])
        all_idx = np.concatenate([idx for _, idx in splittable])
        # histogram layout: node-major, then the node's chosen features in
        # ascending order, then bins; one segment per (node, feature)
        seg_size = sizes[feats].ravel()
        seg_off = np.cumsum(seg_size) - seg_size
        n_slots = int(seg_size.sum())
        seg = owner[:, None] * k + np.arange(k)[None, :]
        flat = (seg_off[seg] + Xb[all_idx[:, None], feats[owner]]).ravel()
        ww = np.repeat(w[all_idx], k)
        wt = np.repeat(w[all_idx] * target[all_idx], k)
        slot_seg = np.repeat(np.arange(m * k), seg_size)
        slot_node = slot_seg // k
        slot_bin = np.arange(n_slots) - seg_off[slot_seg]
        stats = []
        for weights in (ww, wt, None):
            cs = np.bincount(flat, weights=weights, minlength=n_slots).cumsum()
            before = np.where(seg_off > 0, cs[np.maximum(seg_off - 1, 0)], 0)
            stats.append(cs - before[slot_seg])
        c_left, s_left, r_left = stats
        c_all = np.bincount(owner, weights=w[all_idx], minlength=m)[slot_node]
        s_all = np.bincount(owner, weights=w[all_idx] * target[all_idx], minlength=m)[slot_node]
        r_all = np.bincount(owner, minlength=m)[slot_node]
        c_right, s_right = c_all - c_left, s_all - s_left
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = s_left**2 / c_left + s_right**2 / c_right - s_all**2 / c_all
        ok = (r_left >= min_samples_leaf) & (r_all - r_left >= min_samples_leaf) & (c_left > 0) & (c_right > 0)
        ok &= slot_bin < seg_size[slot_seg] - 1
        gain = np.where(ok, gain, -np.inf)
        node_start = seg_off[np.arange(m) * k]
        node_end = np.r_[node_start[1:], n_slots]
        next_frontier = []
        for i, (node, idx) in enumerate(splittable):
            g = gain[node_start[i]:node_end[i]]
            best = int(np.argmax(g))  # first maximum: lowest feature, then lowest threshold
            if not np.isfinite(g[best]) or g[best] <= 1e-12 * max(1.0, abs(s_all[node_start[i]])):
                value[node] = leaf_value(idx, w[idx])
                continue
            slot = node_start[i] + best
            f, b = int(feats[i, slot_seg[slot] % k]), int(slot_bin[slot])
            go_left = Xb[idx, f] <= b
            l, r = new_node(), new_node()
            feature[node], threshold[node] = f, float(binner.edges[f][b])
            left[node], right[node] = l, r
            next_frontier += [(l, idx[go_left]), (r, idx[~go_left])]
        frontier = next_frontier
        depth += 1
    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                        np.array(right, dtype=np.int64), np.array(value))


def _mean_leaf(y):
    def leaf(idx, w):
        return float(np.sum(w * y[idx]) / np.sum(w))
    return leaf


def tree_fit(X, y, max_depth: int | None = None, max_bins: int = 255, min_samples_leaf: int = 1) -> DecisionTree:
    """Single classification tree; leaves hold the positive fraction."""
    X, yf = _check_xy(X, y)
    binner = Binner(X, max_bins)
    return grow_tree(binner.transform(X), binner, yf, _mean_leaf(yf), max_depth,
                     min_samples_leaf=min_samples_leaf)


# random forest


@dataclass
class RandomForestModel:
    trees: list[DecisionTree]
    seeds: list[int] = field(default_factory=list)

    def predict_proba(self, X) -> np.ndarray:
        X = _check_xy(X)
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def to_dict(self) -> dict:
        return {"kind": "rf", "trees": [t.to_dict() for t in self.trees], "seeds": self.seeds}


def rf_fit(X, y, n_trees: int = 100, max_depth: int | None = 8, feature_frac: float | None = None,
           rng: np.random.Generator | int | None = 0, bootstrap: bool = True, max_bins: int = 255,
           min_samples_leaf: int = 1) -> RandomForestModel:
    """Bagged CART trees with per-node feature subsampling.

    ``feature_frac`` defaults to ``sqrt(d) / d``.  Each tree draws its
    bootstrap sample and feature subsets from its own seeded stream.
    """
    if max_depth is not None and max_depth < 1:
        raise ValueError("max_depth must be at least 1")
    if n_trees < 1:
        raise ValueError("need at least one tree")
    X, yf = _check_xy(X, y)
    n, d = X.shape
    frac = math.sqrt(d) / d if feature_frac is None else feature_frac
    k = max(1, int(round(frac * d)))
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    binner = Binner(X, max_bins)
    Xb = binner.transform(X)
    seeds = rng.integers(0, 2**31 - 1, size=n_trees).tolist()
    trees = []
    for s in seeds:
        tr = np.random.default_rng(s)
        w = np.bincount(tr.integers(0, n, n), minlength=n).astype(np.float64) if bootstrap else np.ones(n)
        trees.append(grow_tree(Xb, binner, yf, _mean_leaf(yf), max_depth, w, None if k >= d else k, tr,
                               min_samples_leaf))
    return RandomForestModel(trees, seeds)


def rf_predict_proba(model: RandomForestModel, X) -> np.ndarray:
    return model.predict_proba(X)


# gradient boosting


@dataclass
class GradientBoostModel:
    init_logodds: float
    stages: list[tuple[DecisionTree, float]]
    train_loss: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = _check_xy(X)
        f = np.full(X.shape[0], self.init_logodds)
        for tree, rate in self.stages:
            f += rate * tree.predict(X)
        return f

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.decision_function(X))

    def to_dict(self) -> dict:
        return {"kind": "gb", "init_logodds": self.init_logodds,
                "stages": [{"tree": t.to_dict(), "rate": r} for t, r in self.stages],
                "train_loss": self.train_loss}


def gb_fit(X, y, n_stages: int = 100, learning_rate: float = 0.1, max_depth: int = 3,
           max_bins: int = 255, min_samples_leaf: int = 1) -> GradientBoostModel:
    """Log-loss boosting: each stage fits a tree to ``y - p`` with Newton leaf values.

    ``train_loss[m]`` is the training log-loss after ``m`` stages.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    X, yf = _check_xy(X, y)
    prior = yf.mean()
    init = float(np.log(prior / (1.0 - prior)))
    binner = Binner(X, max_bins)
    Xb = binner.transform(X)
    f = np.full(X.shape[0], init)
    model = GradientBoostModel(init, [], [_log_loss(yf, expit(f))])
    for _ in range(n_stages):
        p = expit(f)
        resid = yf - p
        hess = p * (1.0 - p)

        def newton(idx, w, resid=resid, hess=hess):
            return float(np.sum(resid[idx]) / max(np.sum(hess[idx]), 1e-12))

        tree = grow_tree(Xb, binner, resid, newton, max_depth, min_samples_leaf=min_samples_leaf)
        f = f + learning_rate * tree.predict(X)
        model.stages.append((tree, learning_rate))
        model.train_loss.append(_log_loss(yf, expit(f)))
    return model


def gb_constant(y) -> GradientBoostModel:
    """The zero-stage model: base-rate probability everywhere."""
    yf = np.asarray(y, dtype=np.float64)
    prior = yf.mean()
    return GradientBoostModel(float(np.log(prior / (1.0 - prior))), [], [])


def gb_predict_proba(model: GradientBoostModel, X) -> np.ndarray:
    return model.predict_proba(X)


# uniform access by family name

FAMILIES = ("lr", "rf", "gb")
DEFAULTS = {
    "lr": {"l2": 1.0},
    "rf": {"n_trees": 100, "max_depth": 8},
    "gb": {"n_stages": 100, "learning_rate": 0.1, "max_depth": 3},
}


def fit_family(family: str, X, y, params: dict | None = None, seed: int = 0):
    params = {**DEFAULTS[family], **(params or {})}
    if family == "lr":
        return lr_fit(X, y, **params)
    if family == "rf":
        return rf_fit(X, y, rng=seed, **params)
    if family == "gb":
        return gb_fit(X, y, **params)
    raise ValueError(f"unknown classifier family {family!r}")


def model_from_dict(d: dict):
    kind = d["kind"]
    if kind == "lr":
        return LogisticModel(np.asarray(d["weights"], dtype=np.float64), float(d["bias"]))
    if kind == "rf":
        return RandomForestModel([DecisionTree.from_dict(t) for t in d["trees"]], list(d.get("seeds", [])))
    if kind == "gb":
        return GradientBoostModel(float(d["init_logodds"]),
                                  [(DecisionTree.from_dict(s["tree"]), float(s["rate"])) for s in d["stages"]],
                                  list(d.get("train_loss", [])))
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(path, model) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
