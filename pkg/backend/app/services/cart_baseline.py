"""CART decision tree baseline (Gini impurity, binary axis-aligned splits)"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from app.core.observability import trace_pipeline
from app.services.gray_encoder import NormStats, encode_window
from app.services.sensor_ingest import Window

logger = logging.getLogger(__name__)

CART_FEATURE_MODES = ("image", "raw_temperature")
CART_FORMAT = "sensorlens-cart"

# strict-decrease guard against float round-off
_MIN_GAIN = 1e-12


class CartError(Exception):
    """Custom exception for CART training and model I/O errors"""
    pass


class TreeNode(BaseModel):
    """Leaf (prediction + class counts) or split (feature, threshold, children)"""
    prediction: int
    counts: List[int]
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @model_validator(mode="after")
    def _check_children(self) -> "TreeNode":
        has_split = self.feature is not None
        if has_split != (self.left is not None) or has_split != (self.right is not None):
            raise ValueError("split nodes need feature, threshold and both children")
        if has_split and self.threshold is None:
            raise ValueError("split nodes need a threshold")
        return self

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def leaf_count(self) -> int:
        if self.is_leaf:
            return 1
        return self.left.leaf_count() + self.right.leaf_count()


TreeNode.model_rebuild()


def gini(counts: Sequence[int]) -> float:
    """1 - sum(p_k^2); 0 for a pure or empty node."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _class_counts(labels: np.ndarray, n_classes: int) -> List[int]:
    return np.bincount(labels, minlength=n_classes).tolist()


def _leaf(labels: np.ndarray, n_classes: int) -> TreeNode:
    counts = _class_counts(labels, n_classes)
    # majority; ties go to the higher class index (abnormal for binary labels)
    prediction = int(len(counts) - 1 - np.argmax(counts[::-1]))
    return TreeNode(prediction=prediction, counts=counts)


def _best_split(
    X: np.ndarray, y: np.ndarray, min_leaf: int, n_classes: int
) -> Optional[Tuple[int, float, float]]:
    """
    Lowest weighted Gini over all features and midpoint thresholds.

    Returns:
        (feature, threshold, weighted_gini) or None when no split is allowed.
        Ties go to the lowest feature index, then the lowest threshold.
    """
    n, d = X.shape
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    onehot = np.eye(n_classes, dtype=np.float64)[y[order]]  # (n, d, k)
    left_counts = np.cumsum(onehot, axis=0)[:-1]             # split after row i
    total = left_counts[-1] + onehot[-1]
    right_counts = total - left_counts

    n_left = np.arange(1, n, dtype=np.float64)[:, np.newaxis]
    n_right = n - n_left
    gini_left = 1.0 - np.sum((left_counts / n_left[..., np.newaxis]) ** 2, axis=-1)
    gini_right = 1.0 - np.sum((right_counts / n_right[..., np.newaxis]) ** 2, axis=-1)
    weighted = (n_left * gini_left + n_right * gini_right) / n

    valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    weighted = np.where(valid, weighted, np.inf)

    flat = int(np.argmin(weighted.T))          # row-major over (feature, position)
    feature, pos = divmod(flat, n - 1)
    lo, hi = xs[pos, feature], xs[pos + 1, feature]
    threshold = (lo + hi) / 2.0
    if not lo < threshold:
        threshold = hi
    return feature, float(threshold), float(weighted[pos, feature])


def _grow(X: np.ndarray, y: np.ndarray, depth: int, max_depth: int, min_leaf: int, n_classes: int) -> TreeNode:
    node = _leaf(y, n_classes)
    parent_gini = gini(node.counts)
    if parent_gini == 0.0 or depth >= max_depth or len(y) < 2 * min_leaf:
        return node

    split = _best_split(X, y, min_leaf, n_classes)
    if split is None:
        return node
    feature, threshold, weighted = split
    if not weighted < parent_gini - _MIN_GAIN:
        return node

    go_left = X[:, feature] < threshold
    return TreeNode(
        prediction=node.prediction,
        counts=node.counts,
        feature=feature,
        threshold=threshold,
        left=_grow(X[go_left], y[go_left], depth + 1, max_depth, min_leaf, n_classes),
        right=_grow(X[~go_left], y[~go_left], depth + 1, max_depth, min_leaf, n_classes),
    )


@trace_pipeline
def train_cart(features: np.ndarray, labels: np.ndarray, max_depth: int = 12, min_leaf: int = 5) -> TreeNode:
    """
    Grow a CART tree greedily on Gini impurity.

    Growth stops on purity, at ``max_depth``, or when a split would leave
    fewer than ``min_leaf`` samples on either side. Every accepted split
    strictly lowers the weighted Gini.

    Raises:
        CartError: If the input is empty or inconsistent
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise CartError("CART needs a non-empty (n, d) feature matrix")
    if y.shape != (X.shape[0],):
        raise CartError("labels must match the number of feature rows")
    if max_depth < 0 or min_leaf < 1:
        raise ValueError("max_depth must be >= 0 and min_leaf >= 1")
    if y.min() < 0:
        raise CartError("labels must be non-negative class indices")

    tree = _grow(X, y, 0, max_depth, min_leaf, n_classes=max(int(y.max()) + 1, 2))
    logger.info(f"CART grown: depth={tree.depth()} leaves={tree.leaf_count()} on {X.shape[0]} samples")
    return tree


def predict_cart(tree: TreeNode, x: np.ndarray) -> int:
    """Descend from the root; value < threshold goes left."""
    node = tree
    while not node.is_leaf:
        node = node.left if x[node.feature] < node.threshold else node.right
    return node.prediction


def predict_cart_batch(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    return np.array([predict_cart(tree, row) for row in np.asarray(X)], dtype=np.int64)


def cart_features(windows: Sequence[Window], stats: NormStats, mode: str = "image") -> np.ndarray:
    """
    Feature rows for CART.

    ``image`` uses the 256 normalized gray values the CNN sees;
    ``raw_temperature`` uses the 64 raw temperature readings.
    """
    if mode == "image":
        return np.stack([encode_window(w, stats).flatten() for w in windows])
    if mode == "raw_temperature":
        return np.stack([w.temperature for w in windows])
    raise ValueError(f"CART feature mode must be one of {CART_FEATURE_MODES}")


class CartModelFile(BaseModel):
    """Serialized CART model: tree plus what is needed to rebuild its inputs"""
    format: str = CART_FORMAT
    feature_mode: str = "image"
    max_depth: int = 12
    min_leaf: int = 5
    extra: dict = Field(default_factory=dict)
    tree: TreeNode


def tree_to_json(tree: TreeNode) -> str:
    return tree.model_dump_json(indent=2)


def tree_from_json(text: str) -> TreeNode:
    return TreeNode.model_validate_json(text)


def save_cart(path: Path, model: CartModelFile) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Saved CART model to {path}")
    return path


def load_cart(path: Path) -> CartModelFile:
    try:
        model = CartModelFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise CartError(f"Cannot read CART model {path}: {e}") from e
    if model.format != CART_FORMAT:
        raise CartError(f"{path} is not a CART model file")
    return model
