"""Schema-validated tabular datasets for the screening pipeline.

A :class:`Dataset` stores features in a single float64 matrix: numeric columns
hold raw values, categorical columns hold integer level codes (indices into
the schema's level list). Raw integer scores for each target column are kept
alongside. Datasets are immutable after construction; all arrays are marked
read-only so they can be shared freely across threads and worker processes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class DataError(Exception):
    """Base class for schema and ingestion failures."""


class MissingColumn(DataError):
    pass


class UnknownColumn(DataError):
    pass


class UnknownLevel(DataError):
    pass


class NonFiniteNumeric(DataError):
    pass


class OutOfRangeNumeric(DataError):
    pass


class EmptyDataset(DataError):
    pass


class UnknownTarget(DataError):
    pass


class UnknownFeature(DataError):
    pass


class NotCategorical(DataError):
    pass


@dataclass(frozen=True)
class Feature:
    """One feature column: numeric (optionally bounded) or categorical."""

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if not self.name:
            raise DataError("feature name must be nonempty")
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.levels:
                raise DataError(f"feature {self.name!r}: categorical needs levels")
            if len(set(self.levels)) != len(self.levels):
                raise DataError(f"feature {self.name!r}: duplicate levels")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise DataError(f"feature {self.name!r}: lo > hi")


@dataclass(frozen=True)
class TargetColumn:
    """A raw integer score column with its declared range."""

    name: str
    lo: int
    hi: int

    def __post_init__(self):
        if not self.name:
            raise DataError("target name must be nonempty")
        if self.lo > self.hi:
            raise DataError(f"target {self.name!r}: lo > hi")


@dataclass(frozen=True)
class Schema:
    features: tuple[Feature, ...]
    targets: tuple[TargetColumn, ...]

    def __post_init__(self):
        names = [f.name for f in self.features] + [t.name for t in self.targets]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names in schema")

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def target_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.targets)

    def feature_index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise UnknownFeature(f"no feature named {name!r}")

    def feature(self, name: str) -> Feature:
        return self.features[self.feature_index(name)]

    def target(self, name: str) -> TargetColumn:
        for t in self.targets:
            if t.name == name:
                return t
        raise UnknownTarget(f"no target named {name!r}")

    def to_json_dict(self) -> dict:
        feats = []
        for f in self.features:
            d: dict = {"name": f.name, "kind": f.kind}
            if f.kind == CATEGORICAL:
                d["levels"] = list(f.levels)
            if f.lo is not None:
                d["lo"] = f.lo
            if f.hi is not None:
                d["hi"] = f.hi
            feats.append(d)
        return {
            "features": feats,
            "targets": [{"name": t.name, "lo": t.lo, "hi": t.hi} for t in self.targets],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Schema":
        try:
            features = tuple(
                Feature(
                    name=f["name"],
                    kind=f["kind"],
                    levels=tuple(f.get("levels", ())),
                    lo=f.get("lo"),
                    hi=f.get("hi"),
                )
                for f in doc["features"]
            )
            targets = tuple(
                TargetColumn(name=t["name"], lo=int(t["lo"]), hi=int(t["hi"]))
                for t in doc.get("targets", ())
            )
        except KeyError as exc:
            raise DataError(f"schema document missing key: {exc}") from exc
        return cls(features=features, targets=targets)


@dataclass(frozen=True)
class TargetSpec:
    """Binarization rule: which score column, cut-off, and comparison mode."""

    column: str
    threshold: int
    mode: str = "strict"  # "strict": score > threshold; "inclusive": score >= threshold

    def __post_init__(self):
        if self.mode not in ("strict", "inclusive"):
            raise DataError(f"unknown binarization mode {self.mode!r}")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix plus raw target scores.

    ``matrix`` is (n, p) float64; categorical entries are level codes.
    ``source_rows`` tracks the original row index of each record so that
    bootstrap resamples stay auditable.
    """

    schema: Schema
    matrix: np.ndarray
    scores: dict[str, np.ndarray] = field(default_factory=dict)
    source_rows: np.ndarray | None = None

    def __post_init__(self):
        _readonly(self.matrix)
        for arr in self.scores.values():
            _readonly(arr)
        if self.source_rows is None:
            object.__setattr__(
                self, "source_rows", np.arange(self.matrix.shape[0], dtype=np.int64)
            )
        _readonly(self.source_rows)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.matrix[:, self.schema.feature_index(name)]

    def decode_column(self, name: str) -> np.ndarray:
        """Categorical column as level strings."""
        f = self.schema.feature(name)
        if f.kind != CATEGORICAL:
            raise NotCategorical(f"feature {name!r} is numeric")
        codes = self.column(name).astype(np.int64)
        return np.asarray(f.levels, dtype=object)[codes]


def _parse_numeric(text: str, feature: Feature, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise NonFiniteNumeric(
            f"line {line}, column {feature.name!r}: not a number: {text!r}"
        ) from None
    if not math.isfinite(value):
        raise NonFiniteNumeric(f"line {line}, column {feature.name!r}: non-finite value")
    if (feature.lo is not None and value < feature.lo) or (
        feature.hi is not None and value > feature.hi
    ):
        raise OutOfRangeNumeric(
            f"line {line}, column {feature.name!r}: {value} outside "
            f"[{feature.lo}, {feature.hi}]"
        )
    return value


def _parse_score(text: str, target: TargetColumn, line: int) -> int:
    try:
        value = int(text)
    except ValueError:
        raise NonFiniteNumeric(
            f"line {line}, column {target.name!r}: not an integer: {text!r}"
        ) from None
    if not target.lo <= value <= target.hi:
        raise OutOfRangeNumeric(
            f"line {line}, column {target.name!r}: score {value} outside "
            f"{target.lo}..{target.hi}"
        )
    return value


def load_csv(path: str | Path, schema: Schema) -> Dataset:
    """Load and validate a UTF-8 comma-separated file against ``schema``.

    The header must contain exactly the schema's columns (any order). Line
    numbers in error messages are 1-based file lines (header is line 1).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None

        expected = set(schema.feature_names) | set(schema.target_names)
        got = set(header)
        missing = expected - got
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {sorted(missing)}")
        extra = got - expected
        if extra:
            raise UnknownColumn(f"{path}: unexpected column(s) {sorted(extra)}")
        if len(got) != len(header):
            raise UnknownColumn(f"{path}: duplicate header columns")

        col_of = {name: header.index(name) for name in header}
        feat_cols = [col_of[f.name] for f in schema.features]
        target_cols = [col_of[t.name] for t in schema.targets]
        level_codes = [
            {lvl: i for i, lvl in enumerate(f.levels)} if f.kind == CATEGORICAL else None
            for f in schema.features
        ]

        rows: list[list[float]] = []
        score_rows: list[list[int]] = []
        for line_no, record in enumerate(reader, start=2):
            if len(record) != len(header):
                raise DataError(f"{path}: line {line_no}: expected {len(header)} fields")
            row = []
            for f, ci, codes in zip(schema.features, feat_cols, level_codes):
                text = record[ci]
                if codes is None:
                    row.append(_parse_numeric(text, f, line_no))
                else:
                    try:
                        row.append(float(codes[text]))
                    except KeyError:
                        raise UnknownLevel(
                            f"line {line_no}, column {f.name!r}: unknown level {text!r}"
                        ) from None
            rows.append(row)
            score_rows.append(
                [_parse_score(record[ci], t, line_no) for t, ci in zip(schema.targets, target_cols)]
            )

    if not rows:
        raise EmptyDataset(f"{path}: no data rows")

    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(schema.features))
    scores_arr = np.asarray(score_rows, dtype=np.int64).reshape(len(rows), len(schema.targets))
    scores = {t.name: scores_arr[:, j].copy() for j, t in enumerate(schema.targets)}
    return Dataset(schema=schema, matrix=matrix, scores=scores)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset back to CSV; round-trips bit-identically via load_csv."""
    schema = dataset.schema
    path = Path(path)
    decoded = {}
    for f in schema.features:
        if f.kind == CATEGORICAL:
            decoded[f.name] = dataset.decode_column(f.name)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(schema.feature_names) + list(schema.target_names))
        matrix = dataset.matrix
        for i in range(dataset.n):
            row: list[str] = []
            for j, f in enumerate(schema.features):
                if f.kind == CATEGORICAL:
                    row.append(decoded[f.name][i])
                else:
                    row.append(repr(matrix[i, j]))
            for t in schema.targets:
                row.append(str(int(dataset.scores[t.name][i])))
            writer.writerow(row)


def binarize(dataset: Dataset, spec: TargetSpec) -> np.ndarray:
    """0/1 labels from a raw score column under the spec's cut-off rule."""
    target = dataset.schema.target(spec.column)  # raises UnknownTarget
    if not target.lo <= spec.threshold <= target.hi:
        raise OutOfRangeNumeric(
            f"threshold {spec.threshold} outside {target.name!r} range "
            f"{target.lo}..{target.hi}"
        )
    scores = dataset.scores[spec.column]
    if spec.mode == "strict":
        return (scores > spec.threshold).astype(np.int8)
    return (scores >= spec.threshold).astype(np.int8)


def bootstrap_sample(dataset: Dataset, seed: int) -> Dataset:
    """Uniform size-n resample with replacement; deterministic given seed.

    The resample's ``source_rows`` point back at the sampled original rows.
    """
    n = dataset.n
    if n < 1:
        raise EmptyDataset("cannot resample an empty dataset")
    idx = np.random.default_rng(seed).integers(0, n, size=n)
    return Dataset(
        schema=dataset.schema,
        matrix=dataset.matrix[idx].copy(),
        scores={name: arr[idx].copy() for name, arr in dataset.scores.items()},
        source_rows=dataset.source_rows[idx].copy(),
    )


def partition_by(dataset: Dataset, group: str) -> list[tuple[str, np.ndarray]]:
    """Row-index subsets per observed level of a categorical feature.

    Subsets are disjoint, cover all rows, and appear in schema level order;
    unobserved levels are omitted.
    """
    f = dataset.schema.feature(group)  # raises UnknownFeature
    if f.kind != CATEGORICAL:
        raise NotCategorical(f"feature {group!r} is not categorical")
    codes = dataset.column(group)
    out = []
    for code, level in enumerate(f.levels):
        idx = np.flatnonzero(codes == code)
        if idx.size:
            out.append((level, idx))
    return out
