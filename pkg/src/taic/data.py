"""CSV ingestion and design-matrix construction.

Two table shapes are supported: long-format repeated measures (subject id,
time, response, covariates) and spatial tables (coordinates, response,
covariates). A missing response, written as an empty cell or ``NA``, marks a
row that can only serve as a prediction point.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from itertools import product
from typing import Optional, Sequence, Union

import numpy as np

from .model import DesignData

__all__ = [
    "LongSchema",
    "LongRow",
    "LongFormatTable",
    "SpatialSchema",
    "SpatialRow",
    "SpatialTable",
    "ByTime",
    "RandomSplit",
    "ByFile",
    "SplitSpec",
    "FixedEffectSpec",
    "SubjectEffects",
    "Coordinates",
    "NoRandomEffects",
    "RandomEffectSpec",
    "load_long_csv",
    "load_spatial_csv",
    "write_long_csv",
    "write_spatial_csv",
    "partition",
    "build_design",
    "subject_covariance",
]

MISSING = ("", "NA", "NaN", "nan")


# -- tables ----------------------------------------------------------------------


@dataclass(frozen=True)
class LongSchema:
    id: str
    time: str
    response: str
    covariates: tuple = ()
    categorical: tuple = ()
    log_response: bool = False

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        unknown = set(self.categorical) - set(self.covariates)
        if unknown:
            raise ValueError(f"categorical columns not among covariates: {sorted(unknown)}")

    @property
    def response_label(self) -> str:
        return f"log({self.response})" if self.log_response else self.response


@dataclass(frozen=True)
class SpatialSchema:
    coords: tuple
    response: str
    covariates: tuple = ()
    categorical: tuple = ()
    log_response: bool = False

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(self.coords))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "categorical", tuple(self.categorical))
        if not self.coords:
            raise ValueError("spatial schema needs at least one coordinate column")
        unknown = set(self.categorical) - set(self.covariates)
        if unknown:
            raise ValueError(f"categorical columns not among covariates: {sorted(unknown)}")

    @property
    def response_label(self) -> str:
        return f"log({self.response})" if self.log_response else self.response


@dataclass(frozen=True)
class LongRow:
    subject: str
    time: float
    response: Optional[float]
    covariates: dict


@dataclass(frozen=True)
class SpatialRow:
    coords: tuple
    response: Optional[float]
    covariates: dict


@dataclass(frozen=True)
class LongFormatTable:
    rows: tuple
    schema: LongSchema
    source: Optional[str] = None

    def __len__(self):
        return len(self.rows)

    def value(self, row: LongRow, name: str):
        if name == self.schema.time:
            return row.time
        return row.covariates[name]

    def with_rows(self, rows) -> "LongFormatTable":
        return replace(self, rows=tuple(rows))


@dataclass(frozen=True)
class SpatialTable:
    rows: tuple
    schema: SpatialSchema
    source: Optional[str] = None

    def __len__(self):
        return len(self.rows)

    def value(self, row: SpatialRow, name: str):
        if name in self.schema.coords:
            return row.coords[self.schema.coords.index(name)]
        return row.covariates[name]

    def with_rows(self, rows) -> "SpatialTable":
        return replace(self, rows=tuple(rows))


Table = Union[LongFormatTable, SpatialTable]


def _parse_float(text: str, lineno: int, column: str, optional: bool) -> Optional[float]:
    text = text.strip()
    if text in MISSING:
        if optional:
            return None
        raise ValueError(f"row {lineno}: missing value in column {column!r}")
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"row {lineno}: malformed number {text!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"row {lineno}: non-finite value in column {column!r}")
    return value


def _response(text: str, lineno: int, schema) -> Optional[float]:
    value = _parse_float(text, lineno, schema.response, optional=True)
    if value is not None and schema.log_response:
        if value <= 0:
            raise ValueError(f"row {lineno}: log transform needs a positive response, got {value}")
        value = math.log(value)
    return value


def _covariates(rec: dict, lineno: int, schema) -> dict:
    out = {}
    for name in schema.covariates:
        raw = rec[name]
        if name in schema.categorical:
            raw = raw.strip()
            out[name] = None if raw in MISSING else raw
        else:
            out[name] = _parse_float(raw, lineno, name, optional=True)
    return out


def _read(path, required: Sequence[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if not header:
            raise ValueError(f"{path}: no data rows")
        if missing:
            raise ValueError(f"{path}: schema mismatch, missing columns {missing}")
        # header is line 1
        records = [(i + 2, rec) for i, rec in enumerate(reader)]
    if not records:
        raise ValueError(f"{path}: no data rows")
    return records


def load_long_csv(path, schema: LongSchema) -> LongFormatTable:
    records = _read(path, [schema.id, schema.time, schema.response, *schema.covariates])
    rows, seen = [], set()
    for lineno, rec in records:
        subject = rec[schema.id].strip()
        if not subject:
            raise ValueError(f"row {lineno}: empty subject id")
        time = _parse_float(rec[schema.time], lineno, schema.time, optional=False)
        if (subject, time) in seen:
            raise ValueError(f"row {lineno}: duplicate (id, time) = ({subject}, {time:g})")
        seen.add((subject, time))
        rows.append(LongRow(subject, time, _response(rec[schema.response], lineno, schema), _covariates(rec, lineno, schema)))
    return LongFormatTable(tuple(rows), schema, str(path))


def load_spatial_csv(path, schema: SpatialSchema) -> SpatialTable:
    records = _read(path, [*schema.coords, schema.response, *schema.covariates])
    rows = []
    for lineno, rec in records:
        coords = tuple(_parse_float(rec[c], lineno, c, optional=False) for c in schema.coords)
        rows.append(SpatialRow(coords, _response(rec[schema.response], lineno, schema), _covariates(rec, lineno, schema)))
    return SpatialTable(tuple(rows), schema, str(path))


def _fmt(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, str):
        return value
    return repr(float(value))


def write_long_csv(table: LongFormatTable, path) -> None:
    """Write the stored values (after any load-time transform)."""
    s = table.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([s.id, s.time, s.response, *s.covariates])
        for r in table.rows:
            w.writerow([r.subject, _fmt(r.time), _fmt(r.response), *(_fmt(r.covariates[c]) for c in s.covariates)])


def write_spatial_csv(table: SpatialTable, path) -> None:
    s = table.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*s.coords, s.response, *s.covariates])
        for r in table.rows:
            w.writerow([*(_fmt(c) for c in r.coords), _fmt(r.response), *(_fmt(r.covariates[c]) for c in s.covariates)])


# -- splits ----------------------------------------------------------------------


@dataclass(frozen=True)
class ByTime:
    holdout_times: frozenset

    def __post_init__(self):
        times = frozenset(float(t) for t in self.holdout_times)
        if not times:
            raise ValueError("holdout_times must be nonempty")
        object.__setattr__(self, "holdout_times", times)


@dataclass(frozen=True)
class RandomSplit:
    """Random partition; ``fraction`` is the share of responded rows used for training."""

    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ValueError("fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ByFile:
    training: str
    prediction: str


SplitSpec = Union[ByTime, RandomSplit, ByFile]


def _load_like(table: Table, path) -> Table:
    if isinstance(table, LongFormatTable):
        return load_long_csv(path, table.schema)
    return load_spatial_csv(path, table.schema)


def partition(table: Table, split: SplitSpec) -> tuple[Table, Table]:
    """Split into (training, prediction) tables.

    Rows without a response always land in the prediction table. For
    :class:`ByFile` both files are read with ``table``'s schema and
    ``table``'s own rows are ignored.
    """
    if isinstance(split, ByFile):
        train = _load_like(table, split.training)
        pred = _load_like(table, split.prediction)
        if any(r.response is None for r in train.rows):
            raise ValueError(f"{split.training}: training rows must all have a response")
    elif isinstance(split, ByTime):
        if not isinstance(table, LongFormatTable):
            raise ValueError("ByTime split needs a long-format table")
        is_pred = [r.time in split.holdout_times or r.response is None for r in table.rows]
        train = table.with_rows(r for r, p in zip(table.rows, is_pred) if not p)
        pred = table.with_rows(r for r, p in zip(table.rows, is_pred) if p)
    elif isinstance(split, RandomSplit):
        responded = [i for i, r in enumerate(table.rows) if r.response is not None]
        rng = np.random.default_rng(split.seed)
        k = int(round(split.fraction * len(responded)))
        chosen = set(rng.permutation(responded)[:k].tolist())
        train = table.with_rows(r for i, r in enumerate(table.rows) if i in chosen)
        pred = table.with_rows(r for i, r in enumerate(table.rows) if i not in chosen)
    else:
        raise TypeError(f"unknown split {type(split).__name__}")
    if len(train) == 0:
        raise ValueError("empty training partition")
    if len(pred) == 0:
        raise ValueError("empty prediction partition")
    return train, pred


# -- design construction ---------------------------------------------------------


@dataclass(frozen=True)
class FixedEffectSpec:
    """Main effects and pairwise interactions (``"a:b"``), plus an optional intercept."""

    terms: tuple = ()
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if t.count(":") > 1:
                raise ValueError(f"only pairwise interactions are supported: {t!r}")


@dataclass(frozen=True)
class SubjectEffects:
    """Per-subject random intercept and slopes on the named columns."""

    intercept: bool = True
    slopes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "slopes", tuple(self.slopes))
        if not self.intercept and not self.slopes:
            raise ValueError("subject effects need an intercept or at least one slope")

    @property
    def block_size(self) -> int:
        return int(self.intercept) + len(self.slopes)


@dataclass(frozen=True)
class Coordinates:
    """Kernel inputs: the spatial coordinates, or the named columns.

    ``standardize`` centres and scales each input with training-row moments.
    """

    columns: Optional[tuple] = None
    standardize: bool = False


@dataclass(frozen=True)
class NoRandomEffects:
    pass


RandomEffectSpec = Union[SubjectEffects, Coordinates, NoRandomEffects]


def _numeric(table: Table, rows, name: str, role: str) -> np.ndarray:
    out = np.empty(len(rows))
    for i, r in enumerate(rows):
        try:
            v = table.value(r, name)
        except KeyError:
            raise ValueError(f"unknown column {name!r}") from None
        if v is None:
            raise ValueError(f"{role} row {i + 1}: missing value for {name!r}")
        if isinstance(v, str):
            raise ValueError(f"column {name!r} is categorical; it cannot be used as a number here")
        out[i] = v
    return out


def _expand(table: Table, train_rows, pred_rows, name: str):
    """Columns for one variable: itself if numeric, reference-coded dummies if categorical."""
    if name in table.schema.categorical:
        levels = sorted({table.value(r, name) for r in train_rows} - {None})
        if not levels:
            raise ValueError(f"categorical {name!r} has no levels in the training rows")
        for role, rows in (("training", train_rows), ("prediction", pred_rows)):
            for r in rows:
                v = table.value(r, name)
                if v is None:
                    raise ValueError(f"{role} rows: missing value for {name!r}")
                if v not in levels:
                    raise ValueError(f"unseen level {v!r} of {name!r} in {role} rows")
        names, cols_tr, cols_pr = [], [], []
        for level in levels[1:]:
            names.append(f"{name}[{level}]")
            cols_tr.append(np.array([table.value(r, name) == level for r in train_rows], dtype=float))
            cols_pr.append(np.array([table.value(r, name) == level for r in pred_rows], dtype=float))
        return names, cols_tr, cols_pr
    return [name], [_numeric(table, train_rows, name, "training")], [_numeric(table, pred_rows, name, "prediction")]


def _fixed(table: Table, train_rows, pred_rows, spec: FixedEffectSpec):
    names = []
    cols_tr, cols_pr = [], []
    if spec.intercept:
        names.append("Intercept")
        cols_tr.append(np.ones(len(train_rows)))
        cols_pr.append(np.ones(len(pred_rows)))
    for term in spec.terms:
        parts = term.split(":")
        expanded = [_expand(table, train_rows, pred_rows, p.strip()) for p in parts]
        if len(expanded) == 1:
            nm, tr, pr = expanded[0]
            names += nm
            cols_tr += tr
            cols_pr += pr
            continue
        (na, ta, pa), (nb, tb, pb) = expanded
        for (i, a), (j, b) in product(enumerate(na), enumerate(nb)):
            names.append(f"{a}:{b}")
            cols_tr.append(ta[i] * tb[j])
            cols_pr.append(pa[i] * pb[j])
    if not names:
        raise ValueError("fixed-effect terms produce no columns")
    return tuple(names), np.column_stack(cols_tr), np.column_stack(cols_pr)


def _subject_z(table, train_rows, pred_rows, spec: SubjectEffects):
    if not isinstance(table, LongFormatTable):
        raise ValueError("subject random effects need a long-format table")
    subjects = list(dict.fromkeys(r.subject for r in (*train_rows, *pred_rows)))
    index = {s: i for i, s in enumerate(subjects)}
    k = spec.block_size

    def build(rows, role):
        Z = np.zeros((len(rows), k * len(subjects)))
        slopes = [_numeric(table, rows, c, role) for c in spec.slopes]
        for i, r in enumerate(rows):
            base = k * index[r.subject]
            j = 0
            if spec.intercept:
                Z[i, base] = 1.0
                j = 1
            for s in slopes:
                Z[i, base + j] = s[i]
                j += 1
        return Z

    return build(train_rows, "training"), build(pred_rows, "prediction")


def _coordinate_z(table, train_rows, pred_rows, spec: Coordinates):
    if spec.columns is None:
        if not isinstance(table, SpatialTable):
            raise ValueError("Coordinates without columns need a spatial table")
        Z = np.array([r.coords for r in train_rows], dtype=float)
        Z_star = np.array([r.coords for r in pred_rows], dtype=float)
    else:
        Z = np.column_stack([_numeric(table, train_rows, c, "training") for c in spec.columns])
        Z_star = np.column_stack([_numeric(table, pred_rows, c, "prediction") for c in spec.columns])
    if spec.standardize:
        center = Z.mean(axis=0)
        scale = Z.std(axis=0)
        scale[scale == 0] = 1.0
        Z = (Z - center) / scale
        Z_star = (Z_star - center) / scale
    return Z, Z_star


def build_design(
    table: Table,
    split: SplitSpec,
    fixed: FixedEffectSpec,
    random: RandomEffectSpec = NoRandomEffects(),
) -> DesignData:
    """Partition ``table`` and build ``X``, ``X*``, ``Z``, ``Z*``.

    Categorical covariates are dummy coded against their lexicographically
    smallest training level. ``y_star`` is set only when every prediction
    row has a response.
    """
    train, pred = partition(table, split)
    base = train if isinstance(split, ByFile) else table
    # ByFile: categorical levels and columns are resolved against the training table's schema
    train_rows, pred_rows = train.rows, pred.rows
    names, X, X_star = _fixed(base, train_rows, pred_rows, fixed)
    if isinstance(random, SubjectEffects):
        Z, Z_star = _subject_z(base, train_rows, pred_rows, random)
    elif isinstance(random, Coordinates):
        Z, Z_star = _coordinate_z(base, train_rows, pred_rows, random)
    elif isinstance(random, NoRandomEffects):
        Z, Z_star = None, None
    else:
        raise TypeError(f"unknown random-effect spec {type(random).__name__}")
    responses = [r.response for r in pred_rows]
    y_star = None if any(v is None for v in responses) else np.array(responses, dtype=float)
    return DesignData(
        y=np.array([r.response for r in train_rows], dtype=float),
        X=X,
        X_star=X_star,
        Z=Z,
        Z_star=Z_star,
        y_star=y_star,
        x_names=names,
    )


def subject_covariance(block, n_subjects: int) -> np.ndarray:
    """Block-diagonal ``G`` with one copy of ``block`` per subject."""
    block = np.atleast_2d(np.asarray(block, dtype=float))
    return np.kron(np.eye(n_subjects), block)
