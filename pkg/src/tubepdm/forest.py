"""CART trees with bagging: regression and binary fault classification.

Split candidates are exactly the midpoints between adjacent distinct sorted
feature values, scored by variance reduction (regression) or Gini decrease
(classification). Ties break to the lowest feature index, then the lowest
threshold, so fits are reproducible across runs and platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionError,
    InvalidDatasetError,
    ModelCorruptionError,
    ModelFormatError,
    ModelVersionError,
)
from .rng import Pcg32

FOREST_MAGIC = b"PDMF"
FOREST_VERSION = 1


@dataclass
class TreeNode:
    """Internal node (feature + threshold + children) or leaf (value)."""

    value: float = 0.0
    feature: int | None = None
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    score: float = 0.0  # split score, kept for feature importance

    @property
    def is_leaf(self) -> bool:
        return self.feature is None


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    score: float


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 16
    max_depth: int = 8
    min_samples_leaf: int = 1
    features_per_split: int | str = "all"  # count or "all"
    bootstrap: bool = True
    rng_seed: int = 0
    task: str = "regression"  # or "classification"

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidDatasetError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_samples_leaf < 1:
            raise InvalidDatasetError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.task not in ("regression", "classification"):
            raise InvalidDatasetError(f"unknown task {self.task!r}")


@dataclass
class Forest:
    trees: list = field(default_factory=list)
    config: ForestConfig = field(default_factory=ForestConfig)
    n_features: int = 0


def _sse(values: np.ndarray) -> float:
    """Sum of squared deviations via the sums formula, in row order."""
    s = float(np.sum(values))
    return float(np.sum(values * values)) - s * s / len(values)


def find_best_split(samples: np.ndarray, labels: np.ndarray, allowed_features=None,
                    task: str = "regression", min_samples_leaf: int = 1) -> SplitCandidate | None:
    """Best (feature, midpoint threshold) by score; None when nothing improves.

    Scores are weighted impurity decreases: variance reduction for regression,
    Gini decrease for classification. Rows with x[feature] <= threshold go left.
    Ties break to the lowest feature index, then the lowest threshold; two
    candidates that induce the same row partition always score identically
    (scores are recomputed from the partition itself among the front-runners),
    so the tie-break is deterministic.
    """
    samples = np.asarray(samples, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n = samples.shape[0]
    if n < 2 or np.all(labels == labels[0]):
        return None
    if allowed_features is None:
        allowed_features = range(samples.shape[1])

    if task == "classification":
        parent_impurity = _gini_from_counts(float(np.sum(labels)), n)

    # fast scan: prefix sums over each feature's sorted order
    candidates: list[tuple[int, float, float]] = []
    for feature in sorted(allowed_features):
        col = samples[:, feature]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        ys = labels[order]
        s1 = np.cumsum(ys)
        total1 = s1[-1]
        if task == "regression":
            s2 = np.cumsum(ys * ys)
            total2 = s2[-1]
            total_sse = total2 - total1 * total1 / n
        for k in range(1, n):
            if xs[k] <= xs[k - 1]:
                continue
            if k < min_samples_leaf or n - k < min_samples_leaf:
                continue
            n_l, n_r = k, n - k
            if task == "regression":
                sse_l = s2[k - 1] - s1[k - 1] * s1[k - 1] / n_l
                sse_r = (total2 - s2[k - 1]) - (total1 - s1[k - 1]) ** 2 / n_r
                score = (total_sse - sse_l - sse_r) / n
            else:
                g_l = _gini_from_counts(s1[k - 1], n_l)
                g_r = _gini_from_counts(total1 - s1[k - 1], n_r)
                score = parent_impurity - (n_l * g_l + n_r * g_r) / n
            if score > 0:
                candidates.append((feature, (xs[k - 1] + xs[k]) / 2.0, float(score)))
    if not candidates:
        return None

    if task == "classification":
        # 0/1 label sums are exact integers, so the fast scores are already
        # canonical per partition
        best = max(candidates, key=lambda c: c[2])
        for feature, threshold, score in candidates:
            if score == best[2]:
                return SplitCandidate(feature=feature, threshold=threshold, score=score)

    # regression: the prefix sums round differently per feature, so re-score
    # the front-runners from the partition itself before breaking ties
    best_fast = max(c[2] for c in candidates)
    cutoff = best_fast - 1e-9 * best_fast
    parent_sse = _sse(labels)
    best_candidate: SplitCandidate | None = None
    for feature, threshold, fast_score in candidates:
        if fast_score < cutoff:
            continue
        mask = samples[:, feature] <= threshold
        # children summed before subtracting: candidates inducing the same
        # partition (possibly with sides swapped) get bit-identical scores
        children = _sse(labels[mask]) + _sse(labels[~mask])
        score = (parent_sse - children) / n
        if best_candidate is None or score > best_candidate.score:
            best_candidate = SplitCandidate(feature=feature, threshold=threshold,
                                            score=score)
    return best_candidate


def _gini_from_counts(positives: float, count: int) -> float:
    p = positives / count
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def fit_tree(samples: np.ndarray, labels: np.ndarray, cfg: ForestConfig,
             rng: Pcg32 | None = None, depth: int = 0) -> TreeNode:
    """Greedy recursive partitioning down to max_depth / min_samples_leaf."""
    samples = np.asarray(samples, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if samples.shape[0] == 0:
        raise InvalidDatasetError("cannot fit a tree on an empty sample set")
    leaf_value = float(np.mean(labels))
    if depth >= cfg.max_depth or samples.shape[0] < 2 * cfg.min_samples_leaf:
        return TreeNode(value=leaf_value)

    n_features = samples.shape[1]
    if cfg.features_per_split == "all" or cfg.features_per_split >= n_features:
        allowed = None
    else:
        if rng is None:
            rng = Pcg32(cfg.rng_seed)
        allowed = rng.sample_indices(n_features, int(cfg.features_per_split))

    split = find_best_split(samples, labels, allowed, cfg.task, cfg.min_samples_leaf)
    if split is None:
        return TreeNode(value=leaf_value)
    mask = samples[:, split.feature] <= split.threshold
    left = fit_tree(samples[mask], labels[mask], cfg, rng, depth + 1)
    right = fit_tree(samples[~mask], labels[~mask], cfg, rng, depth + 1)
    return TreeNode(value=leaf_value, feature=split.feature,
                    threshold=split.threshold, left=left, right=right,
                    score=split.score)


def fit_forest(samples: np.ndarray, labels: np.ndarray, cfg: ForestConfig) -> Forest:
    """n_trees trees, each on its own seeded bootstrap resample.

    Tree i draws from an independent stream seeded cfg.rng_seed + i, so the
    result does not depend on fitting order.
    """
    samples = np.asarray(samples, dtype=float)
    labels = np.asarray(labels, dtype=float)
    n = samples.shape[0]
    if n == 0:
        raise InvalidDatasetError("cannot fit a forest on an empty dataset")
    trees = []
    for tree_index in range(cfg.n_trees):
        rng = Pcg32(cfg.rng_seed + tree_index)
        if cfg.bootstrap:
            idx = np.array([rng.randint_below(n) for _ in range(n)])
            tree_x, tree_y = samples[idx], labels[idx]
        else:
            tree_x, tree_y = samples, labels
        trees.append(fit_tree(tree_x, tree_y, cfg, rng))
    return Forest(trees=trees, config=cfg, n_features=samples.shape[1])


def predict_tree(node: TreeNode, x: np.ndarray) -> float:
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    return node.value


def predict(forest: Forest, x: np.ndarray) -> float:
    """Mean of per-tree predictions (leaf probability mean for classification)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (forest.n_features,):
        raise DimensionError(f"input shape {x.shape} != ({forest.n_features},)")
    return sum(predict_tree(t, x) for t in forest.trees) / len(forest.trees)


def predict_batch(forest: Forest, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    return np.array([predict(forest, x) for x in xs])


def feature_importance(forest: Forest) -> np.ndarray:
    """Total split score per feature across all trees, normalized to sum 1.

    A forest with no splits at all yields the uniform vector.
    """
    totals = np.zeros(forest.n_features)

    def walk(node: TreeNode):
        if node.is_leaf:
            return
        totals[node.feature] += node.score
        walk(node.left)
        walk(node.right)

    for tree in forest.trees:
        walk(tree)
    s = totals.sum()
    if s == 0:
        return np.full(forest.n_features, 1.0 / forest.n_features)
    return totals / s


# ── forest file format ─────────────────────────────────────────────────────
# magic "PDMF", version u16 LE, task byte (0 regression / 1 classification),
# n_features u32 LE, n_trees u32 LE, then each tree pre-order: tag byte
# 0 = leaf (binary64 value) / 1 = internal (u32 feature, binary64 threshold,
# binary64 score).


def _encode_node(node: TreeNode, out: bytearray) -> None:
    if node.is_leaf:
        out += struct.pack("<Bd", 0, node.value)
    else:
        out += struct.pack("<BIdd", 1, node.feature, node.threshold, node.score)
        _encode_node(node.left, out)
        _encode_node(node.right, out)


def save_forest(forest: Forest, path: str) -> None:
    body = bytearray()
    body += FOREST_MAGIC
    body += struct.pack("<H", FOREST_VERSION)
    body += struct.pack("<B", 0 if forest.config.task == "regression" else 1)
    body += struct.pack("<II", forest.n_features, len(forest.trees))
    for tree in forest.trees:
        _encode_node(tree, body)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def _decode_node(data: bytes, offset: int) -> tuple[TreeNode, int]:
    if offset >= len(data):
        raise ModelCorruptionError("forest file truncated mid-tree")
    tag = data[offset]
    offset += 1
    if tag == 0:
        if offset + 8 > len(data):
            raise ModelCorruptionError("forest file truncated in leaf value")
        (value,) = struct.unpack_from("<d", data, offset)
        return TreeNode(value=value), offset + 8
    if tag != 1:
        raise ModelCorruptionError(f"bad node tag {tag}")
    if offset + 20 > len(data):
        raise ModelCorruptionError("forest file truncated in internal node")
    feature, threshold, score = struct.unpack_from("<Idd", data, offset)
    offset += 20
    left, offset = _decode_node(data, offset)
    right, offset = _decode_node(data, offset)
    return TreeNode(feature=int(feature), threshold=threshold, score=score,
                    left=left, right=right), offset


def load_forest(path: str) -> Forest:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != FOREST_MAGIC:
        raise ModelFormatError(f"{path!r} is not a forest file (bad magic)")
    if len(data) < 15:
        raise ModelCorruptionError(f"{path!r} truncated in header")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FOREST_VERSION:
        raise ModelVersionError(f"unsupported forest version {version}")
    task = "regression" if data[6] == 0 else "classification"
    n_features, n_trees = struct.unpack_from("<II", data, 7)
    offset = 15
    trees = []
    for _ in range(n_trees):
        tree, offset = _decode_node(data, offset)
        trees.append(tree)
    if offset != len(data):
        raise ModelCorruptionError(f"{path!r} has {len(data) - offset} trailing bytes")
    return Forest(trees=trees, config=ForestConfig(n_trees=max(1, n_trees), task=task),
                  n_features=n_features)
