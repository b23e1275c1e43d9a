"""Inference for additive ensembles of binary decision trees.

Split rule: go left iff ``features[feature] < threshold``; ties go right.
There is no missing-value branch since inputs are dense one-hot vectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, ModelFormatError, NonFiniteError

MAX_DEPTH = 64


@dataclass(frozen=True)
class Leaf:
    value: float


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: "Node"
    right: "Node"


Node = Union[Leaf, Split]


_P_MIN = math.ulp(0.0)
_P_MAX = 1.0 - 2.0 ** -53


def sigmoid(raw: float) -> float:
    """Logistic link, clamped so finite raw scores never map to exactly 0 or 1."""
    try:
        p = 1.0 / (1.0 + math.exp(-raw))
    except OverflowError:
        p = 0.0
    return min(max(p, _P_MIN), _P_MAX)


@dataclass(frozen=True)
class FlatTree:
    """Array layout of one tree; leaves have ``feature == -1``."""

    feature: list
    threshold: list
    left: list
    right: list
    value: list


def flatten(root: Node) -> FlatTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def emit(node):
        idx = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        if isinstance(node, Leaf):
            value[idx] = node.value
        else:
            feature[idx] = node.feature
            threshold[idx] = node.threshold
            left[idx] = emit(node.left)
            right[idx] = emit(node.right)
        return idx

    emit(root)
    return FlatTree(feature, threshold, left, right, value)


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple
    base_score: float = 0.0
    n_features: int = 1
    _flat: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if self.n_features < 1:
            raise DimensionError("n_features must be positive")
        if not math.isfinite(self.base_score):
            raise NonFiniteError("base_score is not finite")
        for k, tree in enumerate(self.trees):
            _validate(tree, self.n_features, k)
        object.__setattr__(self, "_flat", tuple(flatten(t) for t in self.trees))

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "base_score": self.base_score,
            "trees": [_node_to_dict(t) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TreeEnsemble":
        try:
            n_features = int(doc["n_features"])
            base_score = _number(doc.get("base_score", 0.0), "base_score")
            raw_trees = doc["trees"]
        except (KeyError, TypeError) as exc:
            raise ModelFormatError(f"missing or invalid top-level field: {exc}") from exc
        if not isinstance(raw_trees, list):
            raise ModelFormatError("'trees' must be a list")
        trees = [_node_from_dict(t, k, 0) for k, t in enumerate(raw_trees)]
        return cls(tuple(trees), base_score, n_features)


def _number(v, what: str) -> float:
    if isinstance(v, bool):
        raise ModelFormatError(f"{what} must be a number")
    try:
        x = float(v)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"{what} must be a number, got {v!r}") from exc
    if not math.isfinite(x):
        raise NonFiniteError(f"{what} is not finite: {v!r}")
    return x


def _node_from_dict(doc, tree_idx: int, depth: int) -> Node:
    if depth > MAX_DEPTH:
        raise ModelFormatError(f"tree {tree_idx} exceeds maximum depth {MAX_DEPTH}")
    if not isinstance(doc, dict):
        raise ModelFormatError(f"tree {tree_idx}: node must be an object")
    if "leaf" in doc:
        return Leaf(_number(doc["leaf"], f"tree {tree_idx} leaf value"))
    try:
        feature = doc["feature"]
        if isinstance(feature, bool) or not isinstance(feature, int):
            raise ModelFormatError(f"tree {tree_idx}: feature must be an integer")
        return Split(
            feature,
            _number(doc["threshold"], f"tree {tree_idx} threshold"),
            _node_from_dict(doc["left"], tree_idx, depth + 1),
            _node_from_dict(doc["right"], tree_idx, depth + 1),
        )
    except KeyError as exc:
        raise ModelFormatError(f"tree {tree_idx}: split node missing {exc}") from exc


def _node_to_dict(node: Node) -> dict:
    if isinstance(node, Leaf):
        return {"leaf": node.value}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _validate(root: Node, n_features: int, tree_idx: int) -> None:
    stack = [(root, 0)]
    while stack:
        node, depth = stack.pop()
        if depth > MAX_DEPTH:
            raise ModelFormatError(f"tree {tree_idx} exceeds maximum depth {MAX_DEPTH}")
        if isinstance(node, Leaf):
            if not math.isfinite(node.value):
                raise NonFiniteError(f"tree {tree_idx} has a non-finite leaf")
        else:
            if not 0 <= node.feature < n_features:
                raise DimensionError(
                    f"tree {tree_idx}: feature index {node.feature} out of range [0, {n_features})"
                )
            if not math.isfinite(node.threshold):
                raise NonFiniteError(f"tree {tree_idx} has a non-finite threshold")
            stack.append((node.left, depth + 1))
            stack.append((node.right, depth + 1))


def _as_list(ensemble: TreeEnsemble, features) -> list:
    if hasattr(features, "to_dense"):
        features = features.to_dense()
    if isinstance(features, np.ndarray):
        features = features.tolist()
    else:
        features = list(features)
    if len(features) != ensemble.n_features:
        raise DimensionError(
            f"feature vector has length {len(features)}, ensemble expects {ensemble.n_features}"
        )
    return features


def raw_score_naive(ensemble: TreeEnsemble, features: Sequence[float]) -> float:
    """Recursive reference traversal."""
    x = _as_list(ensemble, features)

    def walk(node):
        if isinstance(node, Leaf):
            return node.value
        return walk(node.left if x[node.feature] < node.threshold else node.right)

    raw = ensemble.base_score
    for tree in ensemble.trees:
        raw += walk(tree)
    return raw


def raw_score(ensemble: TreeEnsemble, features: Sequence[float]) -> float:
    x = _as_list(ensemble, features)
    raw = ensemble.base_score
    for t in ensemble._flat:
        feat, thr, left, right = t.feature, t.threshold, t.left, t.right
        i = 0
        f = feat[0]
        while f >= 0:
            i = left[i] if x[f] < thr[i] else right[i]
            f = feat[i]
        raw += t.value[i]
    return raw


def gbdt_score(ensemble: TreeEnsemble, features) -> float:
    return sigmoid(raw_score(ensemble, features))


def load_gbdt(path) -> TreeEnsemble:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}") from exc
    except RecursionError as exc:
        raise ModelFormatError(f"{path}: nesting too deep") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    return TreeEnsemble.from_dict(doc)


def save_gbdt(ensemble: TreeEnsemble, path) -> None:
    Path(path).write_text(json.dumps(ensemble.to_dict(), sort_keys=True))


def random_tree(rng: np.random.Generator, n_features: int, depth: int,
                leaf_scale: float = 0.1, threshold: float | None = 0.5,
                stop_prob: float = 0.2) -> Node:
    """Random tree of depth at most ``depth``; fixed 0.5 thresholds suit one-hot input."""
    def grow(level):
        if level >= depth or (level > 0 and rng.random() < stop_prob):
            return Leaf(float(rng.uniform(-leaf_scale, leaf_scale)))
        thr = threshold if threshold is not None else float(rng.uniform(-1.0, 1.0))
        return Split(int(rng.integers(n_features)), thr, grow(level + 1), grow(level + 1))

    return grow(0)


def random_ensemble(rng: np.random.Generator, n_trees: int, depth: int, n_features: int,
                    **kwargs) -> TreeEnsemble:
    trees = tuple(random_tree(rng, n_features, depth, **kwargs) for _ in range(n_trees))
    return TreeEnsemble(trees, 0.0, n_features)
