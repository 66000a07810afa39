"""Partial dependence profiles, grouped profiles, and quantile bands.

The profile of feature j for model f over rows R at grid value v is the mean
of f's predictions over R with column j overwritten by v. Numerically the
result is defined to equal the naive double loop exactly (accumulate tree
probabilities per row in tree order, divide by the tree count, then sum rows
in subset order and divide by the subset size). The fast path below reproduces
those operations bit for bit:

  * each tree is walked once per row, forking at nodes that split on j, which
    yields the row's leaf value as a step function of v (a set of disjoint
    half-open intervals covering the axis);
  * the step functions are painted into an (m, G) matrix by pure assignment,
    so no arithmetic is introduced, and matrices are accumulated in tree
    order exactly as a scalar prediction loop would;
  * row means use an axis-0 reduction, which for a C-contiguous float64
    matrix streams rows sequentially (pinned by a regression test).

Quantiles interpolate order statistics linearly: with m sorted values the
p-quantile sits at zero-based rank h = (m-1)p between floor(h) and floor(h)+1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import CATEGORICAL, Dataset, partition_by
from .forest import Forest, SchemaMismatch, _tree_predict_batch


class ProfileError(Exception):
    pass


class EmptySubset(ProfileError):
    pass


class GroupEqualsFeature(ProfileError):
    pass


class MixedGrids(ProfileError):
    pass


class EmptyInput(ProfileError):
    pass


def lerp_quantile(sorted_values: np.ndarray, qs) -> np.ndarray:
    """Linearly interpolated order statistics of a sorted 1-D array."""
    m = sorted_values.shape[0]
    h = (m - 1) * np.asarray(qs, dtype=np.float64)
    lo = np.floor(h).astype(np.int64)
    hi = np.minimum(lo + 1, m - 1)
    frac = h - lo
    return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo])


def _quantile_over_models(sorted_matrix: np.ndarray, q: float) -> np.ndarray:
    """Columnwise quantile of an already sorted (B, G) matrix."""
    b = sorted_matrix.shape[0]
    h = (b - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, b - 1)
    frac = h - lo
    return sorted_matrix[lo] + frac * (sorted_matrix[hi] - sorted_matrix[lo])


@dataclass(frozen=True, eq=False)
class Grid:
    """Evaluation points for one feature.

    Numeric points are strictly increasing raw values; categorical points are
    level codes in schema order with ``levels`` carrying the decoded names.
    """

    feature: str
    points: np.ndarray
    kind: str
    levels: tuple[str, ...] = ()
    max_points: int = 51

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            raise ProfileError(f"grid for {self.feature!r} has no points")
        if self.kind == "numeric" and np.any(np.diff(pts) <= 0):
            raise ProfileError(f"grid for {self.feature!r} must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and self.feature == other.feature
            and self.kind == other.kind
            and np.array_equal(self.points, other.points)
        )

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def labels(self) -> list[str]:
        """Display values: level names for categorical grids, repr otherwise."""
        if self.kind == CATEGORICAL:
            return list(self.levels)
        return [repr(float(v)) for v in self.points]


@dataclass(frozen=True, eq=False)
class Profile:
    feature: str
    grid: Grid
    values: np.ndarray
    group_level: str | None = None
    model_index: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (self.grid.size,):
            raise ProfileError(
                f"profile for {self.feature!r}: {vals.shape[0]} values for "
                f"{self.grid.size} grid points"
            )
        if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
            raise ProfileError("profile values must lie in [0, 1]")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class ProfileBand:
    """Pointwise mean and quantile interval of profiles across a model set."""

    feature: str
    grid: Grid
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    coverage: float
    n_models: int
    group_level: str | None = None

    def __post_init__(self):
        for name in ("mean", "lower", "upper"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.grid.size,):
                raise ProfileError(f"band {name} length does not match grid")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not 0.0 < self.coverage < 1.0:
            raise ProfileError("coverage must be in (0, 1)")


def make_grid(dataset: Dataset, feature: str, max_points: int = 51) -> Grid:
    """Observed levels (categorical) or up to ``max_points`` values (numeric).

    A numeric feature with more distinct values than the cap is reduced to
    evenly spaced quantiles of the observed distribution, so the endpoints are
    always the observed min and max; duplicates are collapsed.
    """
    if max_points < 2:
        raise ProfileError("max_points must be >= 2")
    f = dataset.schema.feature(feature)  # raises UnknownFeature
    col = dataset.column(feature)
    if col.size == 0:
        raise ProfileError("cannot build a grid from an empty dataset")
    if f.kind == CATEGORICAL:
        present = np.unique(col).astype(np.int64)
        return Grid(
            feature=feature,
            points=present.astype(np.float64),
            kind=CATEGORICAL,
            levels=tuple(f.levels[c] for c in present),
            max_points=max_points,
        )
    distinct = np.unique(col)
    if distinct.shape[0] <= max_points:
        points = distinct
    else:
        qs = np.linspace(0.0, 1.0, max_points)
        points = np.unique(lerp_quantile(np.sort(col), qs))
    return Grid(feature=feature, points=points, kind="numeric", max_points=max_points)


def _paint_tree_numeric(tree, categorical, X, j, grid_points, flat_index, buf):
    """Fill ``buf[i, k]`` with the tree's leaf value for row i at grid point k.

    One traversal per row: at nodes splitting on j the row follows both
    children with the interval constraint narrowed; elsewhere it routes by its
    own data. Each row's emitted (interval -> leaf) entries tile the axis, so
    the painted ranges cover every (row, grid) cell exactly once.
    """
    m = X.shape[0]
    g = grid_points.shape[0]
    rows = np.arange(m, dtype=np.int64)
    node = np.zeros(m, dtype=np.int64)
    lo = np.full(m, -np.inf)
    hi = np.full(m, np.inf)
    ent_rows, ent_vals, ent_lo, ent_hi = [], [], [], []

    while rows.size:
        f = tree.feature[node]
        at_leaf = f < 0
        if at_leaf.any():
            ent_rows.append(rows[at_leaf])
            ent_vals.append(tree.prob[node[at_leaf]])
            ent_lo.append(lo[at_leaf])
            ent_hi.append(hi[at_leaf])
            keep = ~at_leaf
            rows, node, lo, hi, f = rows[keep], node[keep], lo[keep], hi[keep], f[keep]
            if not rows.size:
                break
        sv = tree.split_value[node]
        on_j = f == j
        if on_j.any():
            off = ~on_j
            r_off, n_off, lo_off, hi_off = rows[off], node[off], lo[off], hi[off]
            x = X[r_off, f[off]]
            sv_off = sv[off]
            go_left = np.where(categorical[f[off]], x == sv_off, x <= sv_off)
            n_off = np.where(go_left, tree.left[n_off], tree.right[n_off])
            r_j, n_j = rows[on_j], node[on_j]
            lo_j, hi_j, sv_j = lo[on_j], hi[on_j], sv[on_j]
            rows = np.concatenate([r_off, r_j, r_j])
            node = np.concatenate([n_off, tree.left[n_j], tree.right[n_j]])
            lo = np.concatenate([lo_off, lo_j, np.maximum(lo_j, sv_j)])
            hi = np.concatenate([hi_off, np.minimum(hi_j, sv_j), hi_j])
        else:
            x = X[rows, f]
            go_left = np.where(categorical[f], x == sv, x <= sv)
            node = np.where(go_left, tree.left[node], tree.right[node])

    rows = np.concatenate(ent_rows)
    vals = np.concatenate(ent_vals)
    lows = np.concatenate(ent_lo)
    his = np.concatenate(ent_hi)
    # Interval (lo, hi] covers grid indices [k0, k1).
    k0 = np.searchsorted(grid_points, lows, side="right")
    k1 = np.searchsorted(grid_points, his, side="right")
    lens = k1 - k0
    offsets = np.cumsum(lens) - lens
    dest = flat_index + np.repeat(rows * g + k0 - offsets, lens)
    buf.ravel()[dest] = np.repeat(vals, lens)


def profile_matrix(forest: Forest, X: np.ndarray, feature_index: int, grid: Grid) -> np.ndarray:
    """Per-row profile values: (m, G) matrix of predictions with column
    ``feature_index`` swept along the grid. Rows are independent, so subsets
    of the result equal the result on the subset."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    m = X.shape[0]
    if X.shape[1] != forest.n_features:
        raise SchemaMismatch(f"expected (m, {forest.n_features}) matrix, got {X.shape}")
    g = grid.size
    n_trees = len(forest.trees)
    acc = np.zeros((m, g))
    if grid.kind == CATEGORICAL:
        xv = X.copy()
        for k in range(g):
            xv[:, feature_index] = grid.points[k]
            col = np.zeros(m)
            for tree in forest.trees:
                col += _tree_predict_batch(tree, forest.categorical, xv)
            acc[:, k] = col
    else:
        buf = np.empty((m, g))
        flat_index = np.arange(m * g, dtype=np.int64)
        for tree in forest.trees:
            _paint_tree_numeric(
                tree, forest.categorical, X, feature_index, grid.points, flat_index, buf
            )
            acc += buf
    acc /= n_trees
    return acc


def _subset_mean(pred: np.ndarray, subset: np.ndarray) -> np.ndarray:
    # Fancy row indexing copies C-contiguously; the axis-0 sum then streams
    # rows sequentially, matching a scalar accumulation loop bit for bit.
    rows = pred[subset]
    return rows.sum(axis=0) / subset.shape[0]


def pdp(
    model: Forest,
    dataset: Dataset,
    row_subset,
    feature: str,
    grid: Grid,
    model_index: int = 0,
) -> Profile:
    """Partial dependence of the model on ``feature`` over the given rows."""
    subset = np.asarray(row_subset, dtype=np.int64).reshape(-1)
    if subset.size == 0:
        raise EmptySubset(f"empty row subset for feature {feature!r}")
    if grid.feature != feature:
        raise MixedGrids(f"grid is for {grid.feature!r}, not {feature!r}")
    j = dataset.schema.feature_index(feature)
    pred = profile_matrix(model, dataset.matrix[subset], j, grid)
    values = pred.sum(axis=0) / subset.shape[0]
    return Profile(
        feature=feature, grid=grid, values=values, group_level=None, model_index=model_index
    )


def grouped_pdp(
    model: Forest,
    dataset: Dataset,
    feature: str,
    group: str,
    grid: Grid,
    model_index: int = 0,
) -> list[Profile]:
    """One profile per observed level of ``group``, sharing a single grid.

    The per-row prediction matrix is computed once; each level's profile is
    the mean over its rows, so the size-weighted combination of the grouped
    profiles reconstructs the ungrouped profile.
    """
    if group == feature:
        raise GroupEqualsFeature("group must differ from feature")
    if grid.feature != feature:
        raise MixedGrids(f"grid is for {grid.feature!r}, not {feature!r}")
    parts = partition_by(dataset, group)  # raises NotCategorical / UnknownFeature
    j = dataset.schema.feature_index(feature)
    pred = profile_matrix(model, dataset.matrix, j, grid)
    return [
        Profile(
            feature=feature,
            grid=grid,
            values=_subset_mean(pred, idx),
            group_level=level,
            model_index=model_index,
        )
        for level, idx in parts
    ]


def aggregate(profiles: list[Profile], coverage: float = 0.95) -> ProfileBand:
    """Pointwise mean and central quantile interval across model profiles.

    The mean is computed as min + mean(values - min) per grid point, which is
    exact for degenerate (all-equal) inputs and keeps the mean inside the
    observed value range.
    """
    if not profiles:
        raise EmptyInput("no profiles to aggregate")
    head = profiles[0]
    for pr in profiles[1:]:
        if pr.grid != head.grid or pr.feature != head.feature:
            raise MixedGrids("profiles do not share a grid")
        if pr.group_level != head.group_level:
            raise MixedGrids("profiles mix group levels")
    if not 0.0 < coverage < 1.0:
        raise ProfileError("coverage must be in (0, 1)")
    stacked = np.stack([pr.values for pr in profiles])
    low = stacked.min(axis=0)
    mean = low + (stacked - low).mean(axis=0)
    ordered = np.sort(stacked, axis=0)
    alpha = 1.0 - coverage
    return ProfileBand(
        feature=head.feature,
        grid=head.grid,
        mean=mean,
        lower=_quantile_over_models(ordered, alpha / 2.0),
        upper=_quantile_over_models(ordered, 1.0 - alpha / 2.0),
        coverage=coverage,
        n_models=len(profiles),
        group_level=head.group_level,
    )
