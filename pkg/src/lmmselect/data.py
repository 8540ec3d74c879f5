"""Longitudinal data containers, CSV ingestion, and design standardization.

A dataset is a list of per-subject blocks (response vector, fixed-effect
design, random-effect design).  The stacked model is ``y = X b + Z g + e``
where ``Z`` is block diagonal across subjects; it is kept in structural
(per-block) form and only materialized densely for small test problems.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .base import CsvParseError, DegenerateColumnError, DimensionError, SchemaError

# Subjects whose visit counts differ by more than this factor trigger a
# balance warning (never an error).
IMBALANCE_WARN_RATIO = 10.0


@dataclass(frozen=True)
class SubjectBlock:
    """One subject's response and design rows."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if Z.size == 0:
            Z = Z.reshape(len(y), 0)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if not (len(self.y) == self.X.shape[0] == self.Z.shape[0]):
            raise DimensionError(
                f"row mismatch within subject block: y has {len(self.y)}, "
                f"X has {self.X.shape[0]}, Z has {self.Z.shape[0]}"
            )

    @property
    def n_obs(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class StandardizationRecord:
    """Column scale factors applied to the stacked fixed design."""

    scale: np.ndarray
    applied: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        if self.applied and np.any(self.scale <= 0):
            raise ValueError("scale factors must be strictly positive")


@dataclass(frozen=True)
class LongitudinalDataset:
    """Ordered per-subject blocks with shared covariate labels."""

    subjects: tuple[SubjectBlock, ...]
    fixed_names: tuple[str, ...]
    random_names: tuple[str, ...]
    subject_ids: tuple[str, ...] = ()
    standardization: StandardizationRecord | None = None

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "fixed_names", tuple(self.fixed_names))
        object.__setattr__(self, "random_names", tuple(self.random_names))
        if not self.subjects:
            raise DimensionError("dataset needs at least one subject")
        d, q = len(self.fixed_names), len(self.random_names)
        for i, blk in enumerate(self.subjects):
            if blk.n_obs < 1:
                raise DimensionError(f"subject {i} has no observations")
            if blk.X.shape[1] != d or blk.Z.shape[1] != q:
                raise DimensionError(
                    f"subject {i} has {blk.X.shape[1]} fixed / {blk.Z.shape[1]} "
                    f"random columns, expected {d} / {q}"
                )
        if not self.subject_ids:
            object.__setattr__(
                self, "subject_ids", tuple(str(i + 1) for i in range(len(self.subjects)))
            )
        else:
            object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
            if len(self.subject_ids) != len(self.subjects):
                raise DimensionError("subject_ids length must match subjects")
        counts = self.n_obs_per_subject
        if max(counts) > IMBALANCE_WARN_RATIO * min(counts):
            warnings.warn(
                "subject visit counts are highly imbalanced "
                f"(max {max(counts)} vs min {min(counts)}); results may degrade",
                stacklevel=2,
            )

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_obs_per_subject(self) -> tuple[int, ...]:
        return tuple(b.n_obs for b in self.subjects)

    @property
    def n_total(self) -> int:
        return sum(self.n_obs_per_subject)

    @property
    def n_fixed(self) -> int:
        return len(self.fixed_names)

    @property
    def n_random(self) -> int:
        return len(self.random_names)

    def stacked_y(self) -> np.ndarray:
        return np.concatenate([b.y for b in self.subjects])

    def stacked_X(self) -> np.ndarray:
        return np.vstack([b.X for b in self.subjects])

    def z_blocks(self) -> "BlockDiagonalZ":
        return BlockDiagonalZ(tuple(b.Z for b in self.subjects))

    def with_columns(
        self, fixed_idx: "list[int] | None" = None, random_idx: "list[int] | None" = None
    ) -> "LongitudinalDataset":
        """Restrict to the given fixed/random columns (None keeps all)."""
        fi = list(range(self.n_fixed)) if fixed_idx is None else list(fixed_idx)
        ri = list(range(self.n_random)) if random_idx is None else list(random_idx)
        subs = tuple(
            SubjectBlock(b.y, b.X[:, fi].reshape(b.n_obs, len(fi)),
                         b.Z[:, ri].reshape(b.n_obs, len(ri)))
            for b in self.subjects
        )
        std = None
        if self.standardization is not None:
            std = StandardizationRecord(self.standardization.scale[fi],
                                        self.standardization.applied)
        return LongitudinalDataset(
            subs,
            tuple(self.fixed_names[j] for j in fi),
            tuple(self.random_names[j] for j in ri),
            self.subject_ids,
            std,
        )


@dataclass(frozen=True)
class BlockDiagonalZ:
    """Structural block-diagonal random design; never densified in solvers.

    Column ``i*q + k`` of the conceptual matrix belongs to subject ``i``
    (0-based), random effect ``k``: subject-major ordering.
    """

    blocks: tuple[np.ndarray, ...]

    @property
    def n_rows(self) -> int:
        return sum(b.shape[0] for b in self.blocks)

    @property
    def n_cols(self) -> int:
        return sum(b.shape[1] for b in self.blocks)

    @property
    def q(self) -> int:
        return self.blocks[0].shape[1] if self.blocks else 0

    def matvec(self, gamma: np.ndarray) -> np.ndarray:
        """Z @ gamma for a subject-major gamma of length N*q."""
        gamma = np.asarray(gamma, dtype=float).ravel()
        if len(gamma) != self.n_cols:
            raise DimensionError(f"gamma has length {len(gamma)}, expected {self.n_cols}")
        out, pos = [], 0
        for b in self.blocks:
            q = b.shape[1]
            out.append(b @ gamma[pos:pos + q])
            pos += q
        return np.concatenate(out) if out else np.zeros(0)

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        """Z.T @ v."""
        v = np.asarray(v, dtype=float).ravel()
        if len(v) != self.n_rows:
            raise DimensionError(f"v has length {len(v)}, expected {self.n_rows}")
        out, pos = [], 0
        for b in self.blocks:
            ni = b.shape[0]
            out.append(b.T @ v[pos:pos + ni])
            pos += ni
        return np.concatenate(out) if out else np.zeros(0)

    def dense(self) -> np.ndarray:
        """Materialize the full matrix (tests and diagnostics only)."""
        if not self.blocks:
            return np.zeros((0, 0))
        return scipy.linalg.block_diag(*self.blocks)


def stack(ds: LongitudinalDataset) -> tuple[np.ndarray, np.ndarray, BlockDiagonalZ]:
    """Return the stacked (y, X, Z-descriptor) of the global model."""
    return ds.stacked_y(), ds.stacked_X(), ds.z_blocks()


def unstack(
    ds: LongitudinalDataset, y: np.ndarray, X: np.ndarray, Z: BlockDiagonalZ
) -> LongitudinalDataset:
    """Rebuild per-subject blocks from stacked arrays (inverse of :func:`stack`)."""
    subs, pos = [], 0
    for i, ni in enumerate(ds.n_obs_per_subject):
        subs.append(SubjectBlock(y[pos:pos + ni], X[pos:pos + ni], Z.blocks[i]))
        pos += ni
    return replace(ds, subjects=tuple(subs))


def standardize(ds: LongitudinalDataset) -> tuple[LongitudinalDataset, StandardizationRecord]:
    """Rescale each stacked fixed-design column to Euclidean norm sqrt(n).

    The random design is left untouched.  Scale factors are recorded so
    estimates can be mapped back to the original scale (divide by them).
    Already-standardized datasets come back unchanged with unit factors.
    """
    X = ds.stacked_X()
    n = ds.n_total
    norms = np.linalg.norm(X, axis=0)
    for j, nrm in enumerate(norms):
        if nrm == 0.0:
            raise DegenerateColumnError(
                f"fixed column '{ds.fixed_names[j]}' is identically zero"
            )
    scale = norms / np.sqrt(n)
    record = StandardizationRecord(scale=scale, applied=True)
    subs = tuple(
        SubjectBlock(b.y, b.X / scale, b.Z) for b in ds.subjects
    )
    out = LongitudinalDataset(subs, ds.fixed_names, ds.random_names, ds.subject_ids, record)
    return out, record


@dataclass(frozen=True)
class CsvSchema:
    """Column-role mapping for :func:`load_csv` / :func:`write_csv`."""

    subject_col: str
    response_col: str
    fixed_cols: tuple[str, ...]
    random_cols: tuple[str, ...] = ()
    add_fixed_intercept: bool = False
    add_random_intercept: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fixed_cols", tuple(self.fixed_cols))
        object.__setattr__(self, "random_cols", tuple(self.random_cols))
        if not self.fixed_cols and not self.add_fixed_intercept:
            raise SchemaError("schema needs at least one fixed covariate column")


INTERCEPT_NAME = "(intercept)"


def load_csv(path, schema: CsvSchema) -> LongitudinalDataset:
    """Read a longitudinal dataset from a headered CSV file.

    Rows are grouped by subject id in first-appearance order, so subjects
    need not be contiguous in the file.  Synthetic intercept columns are
    appended when the schema requests them.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col_index = {name: i for i, name in enumerate(header)}
        needed = [schema.subject_col, schema.response_col,
                  *schema.fixed_cols, *schema.random_cols]
        missing = [c for c in needed if c not in col_index]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}; header is {header}")

        groups: dict[str, list[list[float]]] = {}
        order: list[str] = []
        value_cols = [schema.response_col, *schema.fixed_cols, *schema.random_cols]
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            sid = row[col_index[schema.subject_col]].strip()
            values = []
            for col in value_cols:
                cell = row[col_index[col]].strip()
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CsvParseError(
                        f"{path}: non-numeric value {cell!r} in row {row_no}, "
                        f"column '{col}'"
                    ) from None
            if sid not in groups:
                groups[sid] = []
                order.append(sid)
            groups[sid].append(values)

    if not order:
        raise SchemaError(f"{path}: no data rows")

    d, q = len(schema.fixed_cols), len(schema.random_cols)
    subjects = []
    for sid in order:
        arr = np.asarray(groups[sid], dtype=float)
        y = arr[:, 0]
        X = arr[:, 1:1 + d].reshape(len(y), d)
        Z = arr[:, 1 + d:1 + d + q].reshape(len(y), q)
        if schema.add_fixed_intercept:
            X = np.hstack([X, np.ones((len(y), 1))])
        if schema.add_random_intercept:
            Z = np.hstack([Z, np.ones((len(y), 1))])
        subjects.append(SubjectBlock(y, X, Z))

    fixed_names = list(schema.fixed_cols)
    random_names = list(schema.random_cols)
    if schema.add_fixed_intercept:
        fixed_names.append(INTERCEPT_NAME)
    if schema.add_random_intercept:
        random_names.append(INTERCEPT_NAME)
    return LongitudinalDataset(tuple(subjects), tuple(fixed_names), tuple(random_names),
                               tuple(order))


def write_csv(ds: LongitudinalDataset, path, schema: CsvSchema | None = None) -> None:
    """Write a dataset back to CSV with full float precision."""
    if schema is None:
        schema = CsvSchema(
            subject_col="subject",
            response_col="y",
            fixed_cols=ds.fixed_names,
            random_cols=ds.random_names,
        )
    header = [schema.subject_col, schema.response_col,
              *schema.fixed_cols, *schema.random_cols]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for sid, blk in zip(ds.subject_ids, ds.subjects):
            for r in range(blk.n_obs):
                row = [sid, repr(float(blk.y[r]))]
                row += [repr(float(v)) for v in blk.X[r]]
                row += [repr(float(v)) for v in blk.Z[r]]
                writer.writerow(row)
