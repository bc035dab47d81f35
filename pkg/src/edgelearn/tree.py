"""Greedy CART trees.

Splits are axis-aligned rules ``x[j] <= threshold`` (true goes left).
Candidate thresholds are midpoints between consecutive distinct feature
values, so the search is exhaustive over every distinct partition.

Tie handling is deterministic: among splits whose gain is within
``TIE_TOL`` (relative) of the best, the lowest feature index and then the
lowest threshold wins; majority votes go to the lowest class index. Combined
with order-independent leaf means this makes a fitted tree invariant to the
order of the training rows.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Literal, Union

import numpy as np

from edgelearn.models import LabeledDataset

Impurity = Literal["mse", "entropy", "gini"]

TIE_TOL = 1e-12


@dataclass(frozen=True)
class SplitRule:
    feature: int
    threshold: float

    def __post_init__(self):
        if self.feature < 0:
            raise ValueError("feature index must be non-negative")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


@dataclass(frozen=True)
class Leaf:
    value: float  # class index for classification trees
    n_samples: int


@dataclass(frozen=True)
class Node:
    split: SplitRule
    left: "TreeNode"
    right: "TreeNode"
    n_samples: int


TreeNode = Union[Leaf, Node]


@dataclass(frozen=True)
class StoppingCriteria:
    max_depth: int | None = None
    min_samples: int = 2
    min_gain: float = 0.0

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if self.min_gain < 0:
            raise ValueError("min_gain must be >= 0")


@dataclass(frozen=True)
class DecisionTree:
    root: TreeNode
    n_features: int
    task: str
    n_classes: int | None = None

    def predict(self, x) -> float | int:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_features,):
            raise ValueError(f"expected {self.n_features} features, got shape {x.shape}")
        node = self.root
        while isinstance(node, Node):
            node = node.left if x[node.split.feature] <= node.split.threshold else node.right
        return self._out(node.value)

    def predict_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (N, {self.n_features}) inputs, got shape {X.shape}")
        out = np.empty(X.shape[0], dtype=np.int64 if self.task == "classification" else np.float64)
        stack = [(self.root, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if isinstance(node, Leaf):
                out[idx] = node.value
                continue
            go_left = X[idx, node.split.feature] <= node.split.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def _out(self, value):
        return int(value) if self.task == "classification" else float(value)

    def depth(self) -> int:
        def rec(node):
            return 0 if isinstance(node, Leaf) else 1 + max(rec(node.left), rec(node.right))
        return rec(self.root)

    def leaves(self) -> Iterator[Leaf]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                yield node
            else:
                stack.extend((node.right, node.left))

    def rules(self, feature_names=None) -> list[str]:
        """One human-readable conjunction per root-to-leaf path."""
        name = (lambda j: feature_names[j]) if feature_names else (lambda j: f"x[{j}]")
        out = []

        def rec(node, conds):
            if isinstance(node, Leaf):
                body = " and ".join(conds) if conds else "always"
                out.append(f"if {body} then {self._out(node.value)!r}  (n={node.n_samples})")
                return
            f, t = name(node.split.feature), node.split.threshold
            rec(node.left, conds + [f"{f} <= {t!r}"])
            rec(node.right, conds + [f"{f} > {t!r}"])

        rec(self.root, [])
        return out

    def to_dict(self) -> dict:
        def enc(node):
            if isinstance(node, Leaf):
                return {"value": self._out(node.value), "n": node.n_samples}
            return {
                "feature": node.split.feature,
                "threshold": node.split.threshold,
                "n": node.n_samples,
                "left": enc(node.left),
                "right": enc(node.right),
            }

        return {"task": self.task, "n_features": self.n_features, "n_classes": self.n_classes, "root": enc(self.root)}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        def dec(n):
            if "value" in n:
                return Leaf(n["value"], int(n["n"]))
            return Node(SplitRule(int(n["feature"]), float(n["threshold"])), dec(n["left"]), dec(n["right"]), int(n["n"]))

        return cls(dec(d["root"]), int(d["n_features"]), d["task"], d.get("n_classes"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def candidate_thresholds(column) -> np.ndarray:
    """Midpoints between consecutive distinct values of ``column``."""
    v = np.unique(np.asarray(column, dtype=np.float64))
    return (v[:-1] + v[1:]) / 2.0


def _class_probs(labels, n_classes=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes or 0)
    return counts / labels.size


def _impurity_from_probs(p: np.ndarray, kind: str) -> np.ndarray:
    """Row-wise impurity of class-probability rows (last axis)."""
    if kind == "gini":
        return 1.0 - np.sum(p * p, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -np.sum(terms, axis=-1)


def impurity(values, kind: Impurity) -> float:
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("impurity of an empty node is undefined")
    if kind == "mse":
        y = values.astype(np.float64)
        return float(np.mean((y - y.mean()) ** 2))
    if kind in ("entropy", "gini"):
        return float(_impurity_from_probs(_class_probs(values), kind))
    raise ValueError(f"unknown impurity kind {kind!r}")


def impurity_gain(X, y, split: SplitRule, kind: Impurity) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    left = X[:, split.feature] <= split.threshold
    n, n_left = y.size, int(left.sum())
    if n_left == 0 or n_left == n:
        raise ValueError(f"split {split} leaves one side empty")
    return impurity(y, kind) - (n_left / n) * impurity(y[left], kind) - ((n - n_left) / n) * impurity(y[~left], kind)


def _feature_gains(x: np.ndarray, y: np.ndarray, kind: str, parent: float, n_classes: int):
    """Thresholds and gains of every candidate split on one feature column."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cut = np.nonzero(xs[1:] != xs[:-1])[0]  # last index of each left part
    if cut.size == 0:
        return cut.astype(np.float64), cut.astype(np.float64)
    n = x.size
    n_left = (cut + 1).astype(np.float64)
    n_right = n - n_left
    if kind == "mse":
        yc = y[order].astype(np.float64)
        yc = yc - yc.mean()
        s1 = np.cumsum(yc)[cut]
        s2 = np.cumsum(yc * yc)[cut]
        t1, t2 = yc.sum(), (yc * yc).sum()
        sse_left = s2 - s1 * s1 / n_left
        sse_right = (t2 - s2) - (t1 - s1) ** 2 / n_right
        child = (sse_left + sse_right) / n
    else:
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[order]] = 1.0
        cl = np.cumsum(onehot, axis=0)[cut]
        cr = onehot.sum(axis=0) - cl
        child = (n_left * _impurity_from_probs(cl / n_left[:, None], kind)
                 + n_right * _impurity_from_probs(cr / n_right[:, None], kind)) / n
    thresholds = (xs[cut] + xs[cut + 1]) / 2.0
    return thresholds, parent - child


def best_split(X, y, kind: Impurity, features=None) -> tuple[SplitRule, float] | None:
    """Exhaustive search for the maximum-gain split, or ``None`` if nothing helps."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if y.size < 2:
        return None
    if kind == "mse":
        y = y.astype(np.float64)
        n_classes = 0
    else:
        y = y.astype(np.int64)
        n_classes = int(y.max()) + 1
    parent = impurity(y, kind)
    tol = TIE_TOL * max(1.0, abs(parent))
    feats = range(X.shape[1]) if features is None else sorted(int(j) for j in features)
    candidates = []  # (feature, threshold, gain) in feature then threshold order
    for j in feats:
        thr, gains = _feature_gains(X[:, j], y, kind, parent, n_classes)
        candidates.extend(zip([j] * thr.size, thr.tolist(), gains.tolist()))
    if not candidates:
        return None
    best = max(g for _, _, g in candidates)
    if best <= tol:
        return None
    for j, t, g in candidates:
        if g >= best - tol:
            return SplitRule(j, t), g
    raise AssertionError("unreachable")


def _leaf(y: np.ndarray, task: str, n_classes: int | None) -> Leaf:
    if task == "classification":
        counts = np.bincount(y, minlength=n_classes or 0)
        return Leaf(int(np.argmax(counts)), int(y.size))
    # fsum keeps leaf means independent of row order.
    return Leaf(math.fsum(y.tolist()) / y.size, int(y.size))


def _task_for(kind: str) -> str:
    if kind == "mse":
        return "regression"
    if kind in ("entropy", "gini"):
        return "classification"
    raise ValueError(f"unknown impurity kind {kind!r}")


def fit_tree(
    data: LabeledDataset,
    stopping: StoppingCriteria = StoppingCriteria(),
    kind: Impurity | None = None,
    max_features: int | None = None,
    rng: np.random.Generator | None = None,
) -> DecisionTree:
    """Grow a tree by greedy recursive partitioning.

    ``max_features`` draws that many candidate features (without replacement)
    at every node from ``rng``; ``None`` scans all features.
    """
    if len(data) == 0:
        raise ValueError("cannot fit a tree to an empty dataset")
    if kind is None:
        kind = "gini" if data.task == "classification" else "mse"
    task = _task_for(kind)
    if task != data.task:
        raise ValueError(f"impurity {kind!r} does not fit a {data.task} dataset")
    d = data.dim
    if max_features is not None:
        if not 1 <= max_features <= d:
            raise ValueError(f"max_features must lie in [1, {d}]")
        if rng is None:
            raise ValueError("feature subsampling needs an rng")
    X, y = data.features, data.labels

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        ys = y[idx]
        leaf = _leaf(ys, task, data.n_classes)
        if stopping.max_depth is not None and depth >= stopping.max_depth:
            return leaf
        if idx.size < stopping.min_samples or np.all(ys == ys[0]):
            return leaf
        feats = None
        if max_features is not None and max_features < d:
            feats = rng.choice(d, size=max_features, replace=False)
        found = best_split(X[idx], ys, kind, feats)
        if found is None or found[1] <= stopping.min_gain:
            return leaf
        rule = found[0]
        go_left = X[idx, rule.feature] <= rule.threshold
        return Node(rule, grow(idx[go_left], depth + 1), grow(idx[~go_left], depth + 1), int(idx.size))

    return DecisionTree(grow(np.arange(len(data)), 0), d, task, data.n_classes)


def predict_tree(tree: DecisionTree, x):
    return tree.predict(x)
