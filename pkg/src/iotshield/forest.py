"""Random forest grown from scratch, with cost-complexity pruning and 16/8-bit quantization.

Trees are CART trees on class-weighted Gini impurity. A split sends ``x <= threshold``
to the left child, thresholds sit midway between adjacent distinct sorted values,
and impurity ties are broken towards the lower feature index, then the lower
threshold. Each tree draws its bootstrap sample and feature subsets from its
own generator seeded with ``(seed, tree_index)``, so the model does not depend
on the order in which trees are built.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import FEATURE_SCHEMA_VERSION, DataError, SchemaMismatch

CLASSES = ("Benign", "Attack")
TIE_TOL = 1e-12
DEFAULT_ALPHA_GRID = (0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
THRESHOLD_LEVELS = 65535
LEAF_LEVELS = 255

FeatureSchemaMismatch = SchemaMismatch


class EmptyTrainingSet(DataError):
    pass


class EmptyValidation(DataError):
    pass


class DegenerateTraining(UserWarning):
    """Training data holds a single class; the forest can only predict that class."""


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 5
    features_per_split: int | None = None  # None: ceil(sqrt(n_features))
    bootstrap: bool = True
    prune_alpha: float = 0.0
    balanced: bool = True  # inverse-frequency class weights in the Gini criterion

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth and min_samples_leaf must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")
        if self.prune_alpha < 0:
            raise ValueError("prune_alpha must be >= 0")

    def split_width(self, n_features: int) -> int:
        k = self.features_per_split or math.ceil(math.sqrt(n_features))
        return min(k, n_features)


@dataclass(frozen=True, slots=True)
class Leaf:
    class_counts: tuple[int, int]

    @property
    def attack_probability(self) -> float:
        benign, attack = self.class_counts
        return attack / (benign + attack)


@dataclass(frozen=True, slots=True)
class Internal:
    feature_index: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"
    class_counts: tuple[int, int]  # training samples reaching this node; pruning needs them


TreeNode = Leaf | Internal


def node_count(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 1
    return 1 + node_count(node.left) + node_count(node.right)


@dataclass
class ForestModel:
    trees: list[TreeNode]
    n_features: int
    feature_lo: tuple[float, ...]
    feature_hi: tuple[float, ...]
    params: ForestParams = field(default_factory=ForestParams)
    training_seed: int = 0
    feature_schema_version: int = FEATURE_SCHEMA_VERSION
    classes: tuple[str, str] = CLASSES
    _flat: list | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")

    @property
    def node_count(self) -> int:
        return sum(node_count(t) for t in self.trees)


# --- Training -----------------------------------------------------------------

def _weighted_scores(xs, cls, weights, min_leaf):
    """Weighted child Gini for every cut between positions i and i+1 of sorted xs."""
    w = weights[cls]
    c1 = np.cumsum(w * cls)
    c0 = np.cumsum(w * (1 - cls))
    t0, t1 = c0[-1], c1[-1]
    total = t0 + t1
    l0, l1 = c0[:-1], c1[:-1]
    r0, r1 = t0 - l0, t1 - l1
    wl, wr = l0 + l1, r0 + r1
    n = xs.size
    left_n = np.arange(1, n)
    valid = (xs[:-1] < xs[1:]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (total - (l0 * l0 + l1 * l1) / wl - (r0 * r0 + r1 * r1) / wr) / total
    return np.where(valid, score, np.inf)


def best_split(X, y, weights, idx, features, min_leaf):
    """Lowest weighted-Gini split of rows ``idx`` over ``features``.

    Returns ``(feature, threshold, score)`` or ``None`` when no cut leaves
    ``min_leaf`` samples on both sides.
    """
    per_feature = []
    for f in sorted(int(f) for f in features):
        xv = X[idx, f]
        order = np.argsort(xv, kind="stable")
        xs = xv[order]
        scores = _weighted_scores(xs, y[idx][order], weights, min_leaf)
        if scores.size and np.isfinite(scores).any():
            per_feature.append((f, xs, scores))
    if not per_feature:
        return None
    best = min(float(s.min()) for _, _, s in per_feature)
    for f, xs, scores in per_feature:
        hits = np.flatnonzero(scores <= best + TIE_TOL)
        if hits.size:
            i = int(hits[0])
            return f, float((xs[i] + xs[i + 1]) / 2.0), float(scores[i])
    return None


def class_weights(y: np.ndarray, balanced: bool) -> np.ndarray:
    counts = np.bincount(y, minlength=2).astype(float)
    if not balanced or (counts == 0).any():
        return np.ones(2)
    return counts.sum() / (2.0 * counts)


def _gini(wc: np.ndarray) -> float:
    total = wc.sum()
    return 1.0 - float((wc * wc).sum()) / (total * total)


def grow_tree(X, y, weights, idx, params: ForestParams, rng, depth=0) -> TreeNode:
    counts = np.bincount(y[idx], minlength=2)
    counts_t = (int(counts[0]), int(counts[1]))
    if (depth >= params.max_depth or idx.size < 2 * params.min_samples_leaf
            or counts[0] == 0 or counts[1] == 0):
        return Leaf(counts_t)
    d = X.shape[1]
    features = rng.choice(d, size=params.split_width(d), replace=False)
    split = best_split(X, y, weights, idx, features, params.min_samples_leaf)
    if split is None:
        return Leaf(counts_t)
    f, thr, score = split
    if _gini(counts * weights) - score <= TIE_TOL:
        return Leaf(counts_t)
    go_left = X[idx, f] <= thr
    return Internal(
        f, thr,
        grow_tree(X, y, weights, idx[go_left], params, rng, depth + 1),
        grow_tree(X, y, weights, idx[~go_left], params, rng, depth + 1),
        counts_t,
    )


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, tree_index])


def train(X, y, params: ForestParams = ForestParams(), seed: int = 42,
          n_features: int | None = None) -> ForestModel:
    """Fit a forest on feature matrix ``X`` and 0/1 attack labels ``y``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyTrainingSet("no training samples")
    if n_features is not None and X.shape[1] != n_features:
        raise FeatureSchemaMismatch(f"expected {n_features} features, got {X.shape[1]}")
    if y.shape != (X.shape[0],) or not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be a 0/1 vector matching X")
    if not np.isfinite(X).all():
        raise DataError("training features must be finite")
    if X.shape[0] < 2 or np.unique(y).size < 2:
        warnings.warn("training set holds fewer than two classes", DegenerateTraining, stacklevel=2)
    weights = class_weights(y, params.balanced)
    n = X.shape[0]
    trees = []
    for t in range(params.n_trees):
        rng = _tree_rng(seed, t)
        idx = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        trees.append(grow_tree(X, y, weights, idx, params, rng))
    return ForestModel(
        trees=trees, n_features=X.shape[1],
        feature_lo=tuple(map(float, X.min(axis=0))), feature_hi=tuple(map(float, X.max(axis=0))),
        params=params, training_seed=seed,
    )


# --- Inference ----------------------------------------------------------------

def _check_width(x, n_features):
    if len(x) != n_features:
        raise FeatureSchemaMismatch(f"expected {n_features} features, got {len(x)}")


def tree_proba(node: TreeNode, x) -> float:
    while isinstance(node, Internal):
        node = node.left if x[node.feature_index] <= node.threshold else node.right
    return node.attack_probability


def predict_proba(model: ForestModel, x) -> float:
    """Attack probability of one vector: mean leaf attack frequency over trees."""
    _check_width(x, model.n_features)
    return sum(tree_proba(t, x) for t in model.trees) / len(model.trees)


def _flatten(tree: TreeNode):
    feature, threshold, right, value = [], [], [], []

    def visit(node):
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        right.append(-1)
        value.append(0.0)
        if isinstance(node, Leaf):
            value[i] = node.attack_probability
            return
        feature[i], threshold[i] = node.feature_index, node.threshold
        visit(node.left)
        right[i] = len(feature)
        visit(node.right)

    visit(tree)
    return (np.array(feature), np.array(threshold), np.array(right), np.array(value))


def predict_proba_batch(model: ForestModel, X) -> np.ndarray:
    """Vectorised :func:`predict_proba` over the rows of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_width(X[0] if len(X) else np.zeros(model.n_features), model.n_features)
    if model._flat is None:
        model._flat = [_flatten(t) for t in model.trees]
    rows = np.arange(X.shape[0])
    total = np.zeros(X.shape[0])
    for feature, threshold, right, value in model._flat:
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = feature[node]
            inner = f >= 0
            if not inner.any():
                break
            fi = np.where(inner, f, 0)
            left = X[rows, fi] <= threshold[node]
            node = np.where(inner, np.where(left, node + 1, right[node]), node)
        total += value[node]
    return total / len(model.trees)


def predict(model: ForestModel, X, threshold: float = 0.5) -> np.ndarray:
    return predict_proba_batch(model, X) >= threshold


# --- Pruning ------------------------------------------------------------------

def _leaf_errors(counts: tuple[int, int]) -> int:
    benign, attack = counts
    # A leaf predicts Attack when its attack frequency is >= 0.5.
    return benign if attack >= benign else attack


def prune_tree(node: TreeNode, alpha: float, n_root: int | None = None) -> TreeNode:
    """Minimal cost-complexity subtree for penalty ``alpha`` (per leaf, as a rate).

    Cost of a subtree is training misclassifications / root samples + alpha *
    leaves; a node collapses when doing so does not raise that cost. A zero
    penalty keeps the tree as grown.
    """
    if alpha <= 0:
        return node
    if n_root is None:
        n_root = sum(node.class_counts)
    return _prune(node, alpha * n_root)[0]


def _prune(node, penalty):
    """Returns (node, errors, leaves)."""
    if isinstance(node, Leaf):
        return node, _leaf_errors(node.class_counts), 1
    left, el, nl = _prune(node.left, penalty)
    right, er, nr = _prune(node.right, penalty)
    errors, leaves = el + er, nl + nr
    own = _leaf_errors(node.class_counts)
    if own - errors <= penalty * (leaves - 1):
        return Leaf(node.class_counts), own, 1
    return Internal(node.feature_index, node.threshold, left, right, node.class_counts), errors, leaves


def prune(model: ForestModel, X_val, y_val, alpha_grid: Sequence[float] = DEFAULT_ALPHA_GRID,
          threshold: float = 0.5) -> ForestModel:
    """Prune every tree at the alpha from ``alpha_grid`` with the fewest validation errors.

    Ties go to the larger alpha (smaller trees).
    """
    X_val = np.asarray(X_val, dtype=float)
    y_val = np.asarray(y_val, dtype=np.int64)
    if X_val.ndim != 2 or X_val.shape[0] == 0:
        raise EmptyValidation("pruning needs a non-empty validation set")
    if not alpha_grid:
        raise ValueError("alpha_grid is empty")
    best = None
    for alpha in sorted(float(a) for a in alpha_grid):
        candidate = replace(model, trees=[prune_tree(t, alpha) for t in model.trees],
                            params=replace(model.params, prune_alpha=alpha))
        errors = int(np.count_nonzero(predict(candidate, X_val, threshold) != (y_val == 1)))
        if best is None or errors <= best[0]:
            best = (errors, candidate)
    return best[1]


# --- Quantization -------------------------------------------------------------

@dataclass
class QuantizedTree:
    """Pre-order node arrays; the left child of internal node i is node i+1."""

    feature: np.ndarray         # int8, -1 marks a leaf
    right: np.ndarray           # uint16 index of the right child (0 for leaves)
    threshold_code: np.ndarray  # uint16, one per internal node in pre-order
    leaf_code: np.ndarray       # uint8, one per leaf in pre-order

    def __eq__(self, other):
        return isinstance(other, QuantizedTree) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("feature", "right", "threshold_code", "leaf_code"))


@dataclass
class QuantizedForest:
    trees: list[QuantizedTree]
    n_features: int
    lo: np.ndarray     # per-feature offset (training minimum)
    scale: np.ndarray  # per-feature step: training range / 65535
    params: ForestParams = field(default_factory=ForestParams)
    training_seed: int = 0
    feature_schema_version: int = FEATURE_SCHEMA_VERSION
    _compiled: list | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.scale * THRESHOLD_LEVELS

    def decode_threshold(self, feature: int, code: int) -> float:
        return float(self.lo[feature] + self.scale[feature] * code)

    def encode(self, x) -> list[int]:
        """Clamp a raw feature vector to the training range and code it to 16 bits."""
        self.compile()
        codes = []
        for v, lo, step in zip(x, self._lo, self._step):
            c = round((v - lo) / step) if step > 0 else 0
            codes.append(0 if c < 0 else THRESHOLD_LEVELS if c > THRESHOLD_LEVELS else c)
        return codes

    def compile(self):
        if self._compiled is None:
            self._lo = [float(v) for v in self.lo]
            self._step = [float(v) for v in self.scale]
            compiled = []
            for t in self.trees:
                feature = [int(f) for f in t.feature]
                value, ti, li = [], 0, 0
                for f in feature:
                    if f >= 0:
                        value.append(int(t.threshold_code[ti]))
                        ti += 1
                    else:
                        value.append(int(t.leaf_code[li]))
                        li += 1
                compiled.append((feature, value, [int(r) for r in t.right]))
            self._compiled = compiled
        return self._compiled


def _quantize_tree(node: TreeNode, lo, scale) -> QuantizedTree:
    feature, right, thr, leaves = [], [], [], []

    def visit(n):
        i = len(feature)
        feature.append(-1)
        right.append(0)
        if isinstance(n, Leaf):
            leaves.append(round(n.attack_probability * LEAF_LEVELS))
            return
        f = n.feature_index
        feature[i] = f
        code = round((n.threshold - lo[f]) / scale[f]) if scale[f] > 0 else 0
        thr.append(min(max(code, 0), THRESHOLD_LEVELS))
        visit(n.left)
        right[i] = len(feature)
        visit(n.right)

    visit(node)
    if len(feature) > 65535:
        raise ValueError("tree too large for 16-bit node indices")
    return QuantizedTree(np.array(feature, dtype=np.int8), np.array(right, dtype=np.uint16),
                         np.array(thr, dtype=np.uint16), np.array(leaves, dtype=np.uint8))


def quantize(model: ForestModel) -> QuantizedForest:
    """Affine 16-bit threshold codes per feature and 8-bit leaf probability codes."""
    if model.n_features > 127:
        raise ValueError("feature indices must fit in int8")
    lo = np.array(model.feature_lo, dtype=float)
    scale = (np.array(model.feature_hi, dtype=float) - lo) / THRESHOLD_LEVELS
    return QuantizedForest(
        trees=[_quantize_tree(t, lo, scale) for t in model.trees], n_features=model.n_features,
        lo=lo, scale=scale, params=model.params, training_seed=model.training_seed,
        feature_schema_version=model.feature_schema_version,
    )


def predict_quantized(qmodel: QuantizedForest, x) -> float:
    """Attack probability computed on integer codes; the input is encoded once."""
    _check_width(x, qmodel.n_features)
    trees = qmodel.compile()
    codes = qmodel.encode(x)
    total = 0
    for feature, value, right in trees:
        i = 0
        f = feature[0]
        while f >= 0:
            i = i + 1 if codes[f] <= value[i] else right[i]
            f = feature[i]
        total += value[i]
    return total / (LEAF_LEVELS * len(trees))


def predict_quantized_batch(qmodel: QuantizedForest, X) -> np.ndarray:
    return np.array([predict_quantized(qmodel, x) for x in np.atleast_2d(X)])
