"""Gradient-boosted regression trees with a regularized binary logistic
objective: exact greedy splits, second-order boosting, deterministic fits.

Per boosting round, with current probability p and label y, the gradient is
g = p - y and the hessian h = p(1-p). A leaf's weight is -G/(H + lambda)
over its routed rows, and a split's gain is

    1/2 * [ GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda) ] - gamma.

Candidate thresholds are the midpoints of consecutive distinct sorted
feature values; ties in gain break toward the lower feature index, then the
lower threshold. Every node records its cover (sum of hessians routed
through it), which downstream attribution uses as branch weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, ModelFormatError

MODEL_FORMAT = "geoaudit-gbt"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 250
    max_depth: int = 3
    shrinkage: float = 0.1
    lambda_: float = 1.0
    gamma: float = 0.0
    min_child_cover: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if self.shrinkage <= 0:
            raise ConfigError("shrinkage must be positive")
        if self.lambda_ < 0 or self.gamma < 0 or self.min_child_cover < 0:
            raise ConfigError("lambda, gamma, min_child_cover must be >= 0")


@dataclass
class Tree:
    """Flat-array regression tree; node 0 is the root, -1 marks leaves.

    ``default_left`` is reserved for future missing-value routing; ingestion
    rejects missing cells, so prediction never consults it.
    """

    children_left: np.ndarray   # int32
    children_right: np.ndarray  # int32
    feature: np.ndarray         # int32, -1 at leaves
    threshold: np.ndarray       # float64, nan at leaves
    value: np.ndarray           # float64, leaf weight (0 at internal nodes)
    cover: np.ndarray           # float64, sum of training hessians routed
    default_left: np.ndarray    # bool

    @property
    def n_nodes(self) -> int:
        return len(self.children_left)

    def is_leaf(self, node: int) -> bool:
        return self.children_left[node] < 0

    def validate(self, n_features: int) -> None:
        n = self.n_nodes
        for arr in (self.children_right, self.feature, self.threshold, self.value, self.cover, self.default_left):
            if len(arr) != n:
                raise ModelFormatError("tree arrays disagree on length")
        internal = self.children_left >= 0
        if np.any(self.children_left[internal] >= n) or np.any(self.children_right[internal] >= n):
            raise ModelFormatError("child index out of bounds")
        if np.any((self.children_right < 0) != ~internal):
            raise ModelFormatError("half-leaf node (one child missing)")
        if np.any(self.feature[internal] < 0) or np.any(self.feature[internal] >= n_features):
            raise ModelFormatError("split feature index out of bounds")
        if np.any(self.cover < 0):
            raise ModelFormatError("negative cover")


@dataclass
class Ensemble:
    """Boosted ensemble: margin(x) = base_score + shrinkage * sum of leaf weights."""

    trees: list[Tree]
    base_score: float
    shrinkage: float
    schema: tuple[str, ...]

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def validate(self) -> None:
        for tree in self.trees:
            tree.validate(self.n_features)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class _TreeBuilder:
    """Accumulates nodes in depth-first order while a tree grows."""

    def __init__(self) -> None:
        self.children_left: list[int] = []
        self.children_right: list[int] = []
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.value: list[float] = []
        self.cover: list[float] = []

    def add(self) -> int:
        self.children_left.append(-1)
        self.children_right.append(-1)
        self.feature.append(-1)
        self.threshold.append(np.nan)
        self.value.append(0.0)
        self.cover.append(0.0)
        return len(self.children_left) - 1

    def freeze(self) -> Tree:
        n = len(self.children_left)
        return Tree(
            children_left=np.asarray(self.children_left, dtype=np.int32),
            children_right=np.asarray(self.children_right, dtype=np.int32),
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            value=np.asarray(self.value, dtype=np.float64),
            cover=np.asarray(self.cover, dtype=np.float64),
            default_left=np.ones(n, dtype=bool),
        )


def _best_split(X, g, h, sorted_lists, g_total, h_total, cfg):
    """Exact greedy scan over all features of one node.

    Returns (gain, feature, threshold) or None. Prefix sums run in sorted
    feature order; candidates sit between consecutive distinct values.
    """
    best = None
    denom_parent = g_total * g_total / (h_total + cfg.lambda_)
    for f, order in enumerate(sorted_lists):
        v = X[order, f]
        if v[0] == v[-1]:
            continue
        cg = np.cumsum(g[order])[:-1]
        ch = np.cumsum(h[order])[:-1]
        cut = np.nonzero(v[:-1] < v[1:])[0]
        if cut.size == 0:
            continue
        gl = cg[cut]
        hl = ch[cut]
        hr = h_total - hl
        valid = (hl >= cfg.min_child_cover) & (hr >= cfg.min_child_cover)
        if not valid.any():
            continue
        gr = g_total - gl
        gains = 0.5 * (gl * gl / (hl + cfg.lambda_) + gr * gr / (hr + cfg.lambda_) - denom_parent) - cfg.gamma
        gains[~valid] = -np.inf
        k = int(np.argmax(gains))
        gain = float(gains[k])
        if gain <= 0.0:
            continue
        if best is None or gain > best[0]:
            pos = cut[k]
            threshold = 0.5 * (v[pos] + v[pos + 1])
            best = (gain, f, float(threshold))
    return best


def _grow_tree(X, g, h, cfg: TrainConfig, base_order: list[np.ndarray]) -> Tree:
    n, n_features = X.shape
    builder = _TreeBuilder()

    def build(rows: np.ndarray, sorted_lists: list[np.ndarray], depth: int) -> int:
        node = builder.add()
        g_sum = float(np.sum(g[rows]))
        h_sum = float(np.sum(h[rows]))
        split = None
        if depth < cfg.max_depth and len(rows) >= 2:
            split = _best_split(X, g, h, sorted_lists, g_sum, h_sum, cfg)
        if split is None:
            builder.value[node] = -g_sum / (h_sum + cfg.lambda_)
            builder.cover[node] = h_sum
            return node
        _, f, threshold = split
        goes_left = np.zeros(n, dtype=bool)
        left_rows = rows[X[rows, f] < threshold]
        goes_left[left_rows] = True
        right_rows = rows[~goes_left[rows]]
        left_lists = [lst[goes_left[lst]] for lst in sorted_lists]
        right_lists = [lst[~goes_left[lst]] for lst in sorted_lists]
        builder.feature[node] = f
        builder.threshold[node] = threshold
        left = build(left_rows, left_lists, depth + 1)
        right = build(right_rows, right_lists, depth + 1)
        builder.children_left[node] = left
        builder.children_right[node] = right
        builder.cover[node] = builder.cover[left] + builder.cover[right]
        return node

    build(np.arange(n), base_order, 0)
    return builder.freeze()


def _tree_leaf_values(tree: Tree, X: np.ndarray) -> np.ndarray:
    out = np.empty(len(X), dtype=np.float64)
    stack = [(0, np.arange(len(X)))]
    while stack:
        node, rows = stack.pop()
        if rows.size == 0:
            continue
        if tree.is_leaf(node):
            out[rows] = tree.value[node]
            continue
        mask = X[rows, tree.feature[node]] < tree.threshold[node]
        stack.append((int(tree.children_left[node]), rows[mask]))
        stack.append((int(tree.children_right[node]), rows[~mask]))
    return out


def fit(train: Dataset, cfg: TrainConfig = TrainConfig()) -> Ensemble:
    """Train ``cfg.n_trees`` trees of depth <= ``cfg.max_depth``.

    The base score is the log-odds of the training base rate. Training is
    deterministic given the dataset and config (exact greedy, no sampling).
    """
    return fit_arrays(train.X, train.y, train.schema, cfg)


def fit_arrays(X: np.ndarray, y: np.ndarray, schema, cfg: TrainConfig = TrainConfig()) -> Ensemble:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError("training arrays disagree on shape")
    if len(X) == 0:
        raise DataError("cannot fit on an empty dataset")
    if len(tuple(schema)) != X.shape[1]:
        raise DataError("schema length does not match feature count")
    base_rate = float(np.mean(y))
    if base_rate <= 0.0 or base_rate >= 1.0:
        raise DataError("training labels contain a single class")
    base_score = float(np.log(base_rate / (1.0 - base_rate)))

    base_order = [np.argsort(X[:, f], kind="stable") for f in range(X.shape[1])]
    margin = np.full(len(X), base_score)
    trees: list[Tree] = []
    for _ in range(cfg.n_trees):
        p = _sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        tree = _grow_tree(X, g, h, cfg, base_order)
        trees.append(tree)
        margin = margin + cfg.shrinkage * _tree_leaf_values(tree, X)
    return Ensemble(trees=trees, base_score=base_score, shrinkage=cfg.shrinkage, schema=tuple(schema))


def predict_margin(model: Ensemble, x: np.ndarray) -> float | np.ndarray:
    """Log-odds margin for one row (1-D) or a batch (2-D)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    X = arr.reshape(1, -1) if single else arr
    if X.shape[1] != model.n_features:
        raise DataError(f"row has {X.shape[1]} features, model expects {model.n_features}")
    total = np.zeros(len(X), dtype=np.float64)
    for tree in model.trees:
        total += _tree_leaf_values(tree, X)
    margins = model.base_score + model.shrinkage * total
    return float(margins[0]) if single else margins


def predict_proba(model: Ensemble, x: np.ndarray) -> float | np.ndarray:
    """Default probability: logistic of the margin, clamped to (0, 1)."""
    margins = predict_margin(model, x)
    p = _sigmoid(np.atleast_1d(np.asarray(margins, dtype=np.float64)))
    p = np.clip(p, 5e-324, np.nextafter(1.0, 0.0))
    return float(p[0]) if np.isscalar(margins) else p


def log_loss(model: Ensemble, X: np.ndarray, y: np.ndarray) -> float:
    p = predict_proba(model, np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


# ---------------------------------------------------------------------------
# Serialization: versioned structured-text (JSON) model format, documented in
# the README. Floats survive round-trip exactly (shortest-repr encoding).

_TREE_FIELDS = ("children_left", "children_right", "feature", "threshold", "value", "cover", "default_left")


def _tree_to_doc(tree: Tree) -> dict:
    doc = {name: getattr(tree, name).tolist() for name in _TREE_FIELDS}
    # leaf thresholds are NaN in memory; keep the file strict JSON
    doc["threshold"] = [None if t != t else t for t in doc["threshold"]]
    return doc


def save_model(model: Ensemble, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "base_score": model.base_score,
        "shrinkage": model.shrinkage,
        "feature_names": list(model.schema),
        "trees": [_tree_to_doc(tree) for tree in model.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path) -> Ensemble:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"corrupt model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"{path} is not a {MODEL_FORMAT} model file")
    if doc.get("version") != MODEL_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {doc.get('version')!r} (supported: {MODEL_VERSION})"
        )
    try:
        trees = []
        for td in doc["trees"]:
            thresholds = [np.nan if t is None else t for t in td["threshold"]]
            trees.append(
                Tree(
                    children_left=np.asarray(td["children_left"], dtype=np.int32),
                    children_right=np.asarray(td["children_right"], dtype=np.int32),
                    feature=np.asarray(td["feature"], dtype=np.int32),
                    threshold=np.asarray(thresholds, dtype=np.float64),
                    value=np.asarray(td["value"], dtype=np.float64),
                    cover=np.asarray(td["cover"], dtype=np.float64),
                    default_left=np.asarray(td["default_left"], dtype=bool),
                )
            )
        model = Ensemble(
            trees=trees,
            base_score=float(doc["base_score"]),
            shrinkage=float(doc["shrinkage"]),
            schema=tuple(doc["feature_names"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file {path}: {exc}") from exc
    model.validate()
    return model
