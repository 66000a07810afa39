"""Bagged CART forest producing class-1 probabilities.

Trees are grown breadth-first: at each depth all open nodes are processed at
once with histogram-based split search (two ``np.bincount`` calls per feature
per level), which keeps training vectorized end to end. Split quality is the
Gini impurity decrease, computed from exact integer counts so that relabeling
the classes ``y -> 1 - y`` yields bit-identical split decisions.

Split conventions:
  * numeric features split at midpoints between consecutive distinct values
    observed in the node; routing is ``x <= threshold`` to the left child;
  * categorical features split one level against the rest; the singleton
    level goes left, everything else (including levels unseen in training)
    goes right;
  * ties are broken toward the lowest feature index, then the smallest
    threshold / earliest level in schema order.

Each tree consumes its own generator seeded by ``derive_seed(config.seed, t)``
and draws, in order, the bag indices and then one uniform block per level for
feature subsampling, so forests are reproducible for any scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import CATEGORICAL, Dataset
from .seeds import derive_seed


class ForestError(Exception):
    pass


class TooFewRows(ForestError):
    pass


class SchemaMismatch(ForestError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    mtry: int | None = None  # features tried per split; None -> floor(sqrt(p))
    min_leaf: int = 5
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ForestError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ForestError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ForestError("max_depth must be >= 0")

    def resolved_mtry(self, n_features: int) -> int:
        if self.mtry is None:
            return max(1, math.isqrt(n_features))
        if self.mtry > n_features:
            raise ForestError(f"mtry={self.mtry} exceeds feature count {n_features}")
        return self.mtry


@dataclass(frozen=True)
class Tree:
    """Struct-of-arrays binary tree; node 0 is the root.

    ``feature`` is -1 at leaves; ``split_value`` holds the numeric threshold
    or the categorical level code; ``prob`` is the unsmoothed positive
    fraction at leaves and NaN at internal nodes; ``support`` counts the
    training bag rows that reached the node.
    """

    feature: np.ndarray
    split_value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prob: np.ndarray
    support: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())


@dataclass(frozen=True)
class Forest:
    trees: tuple[Tree, ...]
    config: ForestConfig
    categorical: np.ndarray  # (p,) bool mask over feature columns
    n_features: int

    @property
    def training_seed(self) -> int:
        return self.config.seed

    def tree_seed(self, index: int) -> int:
        return derive_seed(self.config.seed, index)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    brier: float
    positive_rate: float


def _split_gain(parent, p_left, n_left, p_right, n_right, ok):
    """Gini impurity decrease for candidate splits; -inf where not allowed.

    Uses the class-symmetric form pos*(n-pos)/n so the arithmetic is exact
    under label complement.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        score = p_left * (n_left - p_left) / n_left + p_right * (n_right - p_right) / n_right
        gain = parent[:, None] - score
    return np.where(ok, gain, -np.inf)


def _grow_tree(codes, values, is_cat, y_bag, rng, mtry, min_leaf, max_depth):
    """Grow one tree level-by-level on pre-encoded bag columns.

    codes: (p, n) int64 bag values as indices into ``values[f]``.
    values: per-feature sorted distinct raw values of the training data.
    y_bag: (n,) float64 labels aligned with bag slots.
    """
    p, n = codes.shape
    node_arange = np.arange
    feat_parts, sval_parts, left_parts, right_parts = [], [], [], []
    prob_parts, supp_parts = [], []

    rows = np.arange(n, dtype=np.int64)
    node_local = np.zeros(n, dtype=np.int64)
    n_open = 1
    base = 0
    depth = 0

    while rows.size:
        N = np.bincount(node_local, minlength=n_open)
        P = np.bincount(node_local, weights=y_bag[rows], minlength=n_open)
        parent_score = P * (N - P) / N

        can_split = (N >= 2 * min_leaf) & (P > 0) & (P < N)
        if max_depth is not None and depth >= max_depth:
            can_split[:] = False

        if mtry < p:
            u = rng.random((n_open, p))
            pick = np.argsort(u, axis=1, kind="stable")[:, :mtry]
            sampled = np.zeros((n_open, p), dtype=bool)
            sampled[np.repeat(node_arange(n_open), mtry), pick.ravel()] = True
        else:
            sampled = None

        best_gain = np.full(n_open, -np.inf)
        best_feat = np.full(n_open, -1, dtype=np.int32)
        best_code = np.zeros(n_open, dtype=np.int64)
        best_sval = np.full(n_open, np.nan)

        if can_split.any():
            y_rows = y_bag[rows]
            ar = node_arange(n_open)
            for f in range(p):
                k = values[f].shape[0]
                if k < 2:
                    continue
                allowed = can_split if sampled is None else can_split & sampled[:, f]
                if not allowed.any():
                    continue
                comb = node_local * k + codes[f, rows]
                hist = np.bincount(comb, minlength=n_open * k).reshape(n_open, k)
                phist = np.bincount(comb, weights=y_rows, minlength=n_open * k).reshape(n_open, k)
                if is_cat[f]:
                    n_left = hist
                    p_left = phist
                    n_right = N[:, None] - n_left
                    p_right = P[:, None] - p_left
                    ok = allowed[:, None] & (n_left >= min_leaf) & (n_right >= min_leaf)
                    gain = _split_gain(parent_score, p_left, n_left, p_right, n_right, ok)
                    cand = np.argmax(gain, axis=1)
                    g = gain[ar, cand]
                    upd = g > best_gain
                    if upd.any():
                        best_gain[upd] = g[upd]
                        best_feat[upd] = f
                        best_code[upd] = cand[upd]
                        best_sval[upd] = values[f][cand[upd]]
                else:
                    n_left = np.cumsum(hist, axis=1)[:, :-1]
                    p_left = np.cumsum(phist, axis=1)[:, :-1]
                    n_right = N[:, None] - n_left
                    p_right = P[:, None] - p_left
                    # A boundary after value t is real only if t occurs in the node.
                    ok = (
                        allowed[:, None]
                        & (hist[:, :-1] > 0)
                        & (n_left >= min_leaf)
                        & (n_right >= min_leaf)
                    )
                    gain = _split_gain(parent_score, p_left, n_left, p_right, n_right, ok)
                    cand = np.argmax(gain, axis=1)
                    g = gain[ar, cand]
                    upd = g > best_gain
                    if upd.any():
                        # Threshold is the midpoint between the boundary value
                        # and the next value observed in this node.
                        present = np.where(hist > 0, node_arange(k)[None, :], k)
                        nxt = np.flip(np.minimum.accumulate(np.flip(present, 1), 1), 1)
                        hi_idx = np.minimum(nxt[ar, cand + 1], k - 1)
                        thr = 0.5 * (values[f][cand] + values[f][hi_idx])
                        best_gain[upd] = g[upd]
                        best_feat[upd] = f
                        best_code[upd] = cand[upd]
                        best_sval[upd] = thr[upd]

        do_split = best_gain > 0.0
        n_split = int(do_split.sum())
        split_rank = np.cumsum(do_split) - 1
        child_base = base + n_open

        feat_parts.append(np.where(do_split, best_feat, -1).astype(np.int32))
        sval_parts.append(np.where(do_split, best_sval, np.nan))
        left_parts.append(
            np.where(do_split, child_base + 2 * split_rank, -1).astype(np.int32)
        )
        right_parts.append(
            np.where(do_split, child_base + 2 * split_rank + 1, -1).astype(np.int32)
        )
        prob_parts.append(np.where(do_split, np.nan, P / N))
        supp_parts.append(N.astype(np.int32))

        if n_split == 0:
            break

        keep = do_split[node_local]
        rows = rows[keep]
        old_local = node_local[keep]
        f_of = best_feat[old_local]
        c = codes[f_of, rows]
        boundary = best_code[old_local]
        go_left = np.where(is_cat[f_of], c == boundary, c <= boundary)
        node_local = 2 * split_rank[old_local] + np.where(go_left, 0, 1)
        base = child_base
        n_open = 2 * n_split
        depth += 1

    return Tree(
        feature=np.concatenate(feat_parts),
        split_value=np.concatenate(sval_parts),
        left=np.concatenate(left_parts),
        right=np.concatenate(right_parts),
        prob=np.concatenate(prob_parts),
        support=np.concatenate(supp_parts),
    )


def train_forest_matrix(
    matrix: np.ndarray, categorical: np.ndarray, labels, config: ForestConfig
) -> Forest:
    """Train on an encoded (n, p) matrix; ``categorical`` marks code columns."""
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    n, p = matrix.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise SchemaMismatch(f"labels shape {labels.shape} does not match {n} rows")
    if n < 2 * config.min_leaf:
        raise TooFewRows(f"need at least {2 * config.min_leaf} rows, got {n}")
    mtry = config.resolved_mtry(p)
    categorical = np.asarray(categorical, dtype=bool)

    y = labels.astype(np.float64)
    values: list[np.ndarray] = []
    codes = np.empty((p, n), dtype=np.int64)
    for f in range(p):
        vals, inv = np.unique(matrix[:, f], return_inverse=True)
        values.append(vals)
        codes[f] = inv

    trees = []
    for t in range(config.n_trees):
        rng = np.random.default_rng(derive_seed(config.seed, t))
        bag = rng.integers(0, n, size=n)
        trees.append(
            _grow_tree(
                codes[:, bag],
                values,
                categorical,
                y[bag],
                rng,
                mtry,
                config.min_leaf,
                config.max_depth,
            )
        )
    return Forest(trees=tuple(trees), config=config, categorical=categorical, n_features=p)


def train_forest(dataset: Dataset, labels, config: ForestConfig) -> Forest:
    categorical = np.asarray([f.kind == CATEGORICAL for f in dataset.schema.features])
    return train_forest_matrix(dataset.matrix, categorical, labels, config)


def _tree_predict_batch(tree: Tree, categorical, X: np.ndarray) -> np.ndarray:
    """Leaf probability per row of X; pure routing, no arithmetic."""
    m = X.shape[0]
    out = np.empty(m)
    idx = np.arange(m)
    node = np.zeros(m, dtype=np.int64)
    while idx.size:
        f = tree.feature[node]
        at_leaf = f < 0
        if at_leaf.any():
            out[idx[at_leaf]] = tree.prob[node[at_leaf]]
            idx = idx[~at_leaf]
            node = node[~at_leaf]
            f = f[~at_leaf]
            if not idx.size:
                break
        x = X[idx, f]
        sv = tree.split_value[node]
        go_left = np.where(categorical[f], x == sv, x <= sv)
        node = np.where(go_left, tree.left[node], tree.right[node])
    return out


def predict_matrix(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Mean tree probability per row; accumulates trees in fixed order."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise SchemaMismatch(f"expected (m, {forest.n_features}) matrix, got {X.shape}")
    acc = np.zeros(X.shape[0])
    for tree in forest.trees:
        acc += _tree_predict_batch(tree, forest.categorical, X)
    return acc / len(forest.trees)


def predict_proba(forest: Forest, row) -> float:
    """Scalar prediction for one encoded feature record."""
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    if row.shape[0] != forest.n_features:
        raise SchemaMismatch(f"expected {forest.n_features} features, got {row.shape[0]}")
    if not np.all(np.isfinite(row)):
        raise SchemaMismatch("row contains non-finite values")
    cat = forest.categorical
    total = 0.0
    for tree in forest.trees:
        node = 0
        feature = tree.feature
        while feature[node] >= 0:
            f = feature[node]
            sv = tree.split_value[node]
            if cat[f]:
                node = tree.left[node] if row[f] == sv else tree.right[node]
            else:
                node = tree.left[node] if row[f] <= sv else tree.right[node]
        total += tree.prob[node]
    return float(total / len(forest.trees))


def evaluate_matrix(forest: Forest, X: np.ndarray, labels) -> Metrics:
    labels = np.asarray(labels, dtype=np.float64)
    prob = predict_matrix(forest, X)
    hard = prob >= 0.5  # decision threshold fixed at 0.5
    accuracy = float(np.mean(hard == (labels > 0.5)))
    brier = float(np.mean((prob - labels) ** 2))
    return Metrics(accuracy=accuracy, brier=brier, positive_rate=float(np.mean(hard)))


def evaluate(forest: Forest, dataset: Dataset, labels) -> Metrics:
    return evaluate_matrix(forest, dataset.matrix, labels)


def tree_to_json(tree: Tree, node: int = 0) -> dict:
    """Nested-object view of a tree for inspection; not a stable format."""
    if tree.feature[node] < 0:
        return {
            "leaf": True,
            "prob": float(tree.prob[node]),
            "support": int(tree.support[node]),
        }
    return {
        "leaf": False,
        "feature": int(tree.feature[node]),
        "split_value": float(tree.split_value[node]),
        "support": int(tree.support[node]),
        "left": tree_to_json(tree, int(tree.left[node])),
        "right": tree_to_json(tree, int(tree.right[node])),
    }


def forest_to_json(forest: Forest) -> dict:
    return {
        "n_trees": len(forest.trees),
        "seed": forest.config.seed,
        "categorical": forest.categorical.astype(int).tolist(),
        "trees": [tree_to_json(t) for t in forest.trees],
    }
