"""Gradient-boosted regression trees on the logistic loss.

Each round fits a depth-limited tree to the residuals ``y - sigmoid(F)``
by exact greedy squared-error splits, then sets every leaf to the Newton
step ``sum(r) / sum(p (1 - p))`` over its members.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .layers import sigmoid

HESS_GUARD = 1e-12
GBM_FORMAT = "cloudmask-gbm"


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def predict(self, x: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(x), dtype=np.int64)
        while True:
            f = feature[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = x[rows, f[rows]] <= threshold[node[rows]]
            node[rows] = np.where(go_left, left[node[rows]], right[node[rows]])
        return np.asarray(self.value)[node]

    def to_dict(self, node: int = 0) -> dict:
        if self.feature[node] < 0:
            return {"value": self.value[node]}
        return {"feature": self.feature[node], "threshold": self.threshold[node],
                "left": self.to_dict(self.left[node]), "right": self.to_dict(self.right[node])}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        tree = cls()

        def visit(n: dict) -> int:
            if "value" in n:
                return tree.add(value=float(n["value"]))
            idx = tree.add(int(n["feature"]), float(n["threshold"]))
            tree.left[idx] = visit(n["left"])
            tree.right[idx] = visit(n["right"])
            return idx

        visit(d)
        return tree


@dataclass
class GbmModel:
    initial_score: float
    n_features: int
    shrinkage: float = 0.1
    max_depth: int = 3
    min_leaf: int = 5
    n_trees: int = 0
    seed: int = 0
    trees: list[Tree] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"GBM trained on {self.n_features} features, got input {x.shape}")
        score = np.full(len(x), self.initial_score)
        for tree in self.trees:
            score += self.shrinkage * tree.predict(x)
        return score

    def to_dict(self) -> dict:
        return {"format": GBM_FORMAT, "version": 1, "initial_score": self.initial_score,
                "n_features": self.n_features, "shrinkage": self.shrinkage, "max_depth": self.max_depth,
                "min_leaf": self.min_leaf, "n_trees": self.n_trees, "seed": self.seed,
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "GbmModel":
        if d.get("format") != GBM_FORMAT:
            raise FormatError(f"not a GBM model file (format {d.get('format')!r})")
        trees = [Tree.from_dict(t) for t in d["trees"]]
        return cls(float(d["initial_score"]), int(d["n_features"]), float(d["shrinkage"]), int(d["max_depth"]),
                   int(d["min_leaf"]), int(d["n_trees"]), int(d.get("seed", 0)), trees)


def logistic_loss(score: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, score) - y * score))


def best_split(x: np.ndarray, r: np.ndarray, min_leaf: int) -> Optional[tuple[int, float, float]]:
    """Exact greedy split maximizing the drop in squared error of ``r``.

    Thresholds are midpoints between consecutive distinct values; ties go
    to the smallest feature index, then the smallest threshold. Returns
    ``(feature, threshold, gain)`` or ``None`` when no admissible split
    reduces the error.
    """
    n = len(r)
    if n < 2 * min_leaf:
        return None
    total = r.sum()
    base = total * total / n
    best = None
    counts = np.arange(1, n)
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        left_sum = np.cumsum(r[order])[:-1]
        ok = (xs[1:] > xs[:-1]) & (counts >= min_leaf) & (n - counts >= min_leaf)
        if not ok.any():
            continue
        right_sum = total - left_sum
        gain = left_sum ** 2 / counts + right_sum ** 2 / (n - counts) - base
        gain = np.where(ok, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > 1e-12 and (best is None or gain[i] > best[2]):
            best = (f, 0.5 * (xs[i] + xs[i + 1]), float(gain[i]))
    return best


def _leaf_value(score: np.ndarray, y: np.ndarray, shrinkage: float) -> float:
    p = sigmoid(score)
    r = y - p
    gamma = r.sum() / max(float(np.sum(p * (1.0 - p))), HESS_GUARD)
    # backtrack if the shrunken Newton step would raise this leaf's loss
    before = np.sum(np.logaddexp(0.0, score) - y * score)
    for _ in range(30):
        s = score + shrinkage * gamma
        if np.sum(np.logaddexp(0.0, s) - y * s) <= before:
            break
        gamma *= 0.5
    else:
        gamma = 0.0
    return float(gamma)


def _grow(tree: Tree, x: np.ndarray, y: np.ndarray, score: np.ndarray, idx: np.ndarray, depth: int,
          max_depth: int, min_leaf: int, shrinkage: float) -> int:
    split = None
    if depth < max_depth:
        r = y[idx] - sigmoid(score[idx])
        split = best_split(x[idx], r, min_leaf)
    if split is None:
        return tree.add(value=_leaf_value(score[idx], y[idx], shrinkage))
    f, thr, _ = split
    node = tree.add(f, thr)
    go_left = x[idx, f] <= thr
    tree.left[node] = _grow(tree, x, y, score, idx[go_left], depth + 1, max_depth, min_leaf, shrinkage)
    tree.right[node] = _grow(tree, x, y, score, idx[~go_left], depth + 1, max_depth, min_leaf, shrinkage)
    return node


def fit_gbm(features: np.ndarray, labels: np.ndarray, n_trees: int = 200, max_depth: int = 3,
            shrinkage: float = 0.1, min_leaf: int = 5, seed: int = 0) -> GbmModel:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise DataError(f"features must be a non-empty (n, f) array, got {x.shape}")
    if len(y) != len(x):
        raise DataError(f"{len(x)} feature rows but {len(y)} labels")
    if len(x) < 2:
        raise DataError("need at least two samples")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    pos = y.mean()
    if pos in (0.0, 1.0):
        raise DataError("GBM needs both classes in the training labels")
    model = GbmModel(float(np.log(pos / (1.0 - pos))), x.shape[1], shrinkage, max_depth, min_leaf, 0, seed)
    score = np.full(len(y), model.initial_score)
    model.loss_history.append(logistic_loss(score, y))
    all_idx = np.arange(len(y))
    for _ in range(n_trees):
        tree = Tree()
        _grow(tree, x, y, score, all_idx, 0, max_depth, min_leaf, shrinkage)
        score = score + shrinkage * tree.predict(x)
        model.trees.append(tree)
        model.loss_history.append(logistic_loss(score, y))
    model.n_trees = len(model.trees)
    return model


def predict_gbm(model: GbmModel, features: np.ndarray) -> np.ndarray:
    return sigmoid(model.decision_function(features))


def save_gbm(model: GbmModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_gbm(path) -> GbmModel:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read GBM model {path}: {exc}") from exc
    return GbmModel.from_dict(d)
