"""
Longitudinal data containers, CSV ingestion, B-spline bases and the
per-subject design matrices of the functional mean.

A subject ``m`` carries observation times ``t`` (length ``n_m``), the
response ``y``, time-constant covariates ``u`` (length ``p_u``) and three
functional covariate matrices: ``V`` (linear fixed effects), ``W`` (linear
random effects) and ``X`` (inputs of the squared-exponential kernel).

The mean of subject ``m`` is ``A_m @ beta`` with

    A_m = [u_m^T (x) Phi_m, V_m]      beta = (Vec(B), gamma)

where ``Phi_m`` holds the B-spline basis evaluated at ``t_m`` and ``B`` is
the ``D x p_u`` coefficient matrix stacked column by column.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

from .errors import DataError, DataParseError, DomainError, SchemaError

INTERCEPT = "(intercept)"


def _frozen_array(a, ndim):
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(len(arr), 0)
    if arr.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Subject:
    """Observations of one subject. Arrays are copied and made read-only."""

    id: str
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    V: np.ndarray
    W: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        t = _frozen_array(self.t, 1)
        n = len(t)
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", _frozen_array(self.y, 1))
        object.__setattr__(self, "u", _frozen_array(self.u, 1))
        for name in ("V", "W", "X"):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.ndim == 1 and mat.size == 0:
                mat = np.zeros((n, 0))
            object.__setattr__(self, name, _frozen_array(mat, 2))
        if n < 1:
            raise DataError(f"subject {self.id!r} has no observations")
        for name in ("y", "V", "W", "X"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"subject {self.id!r}: {name} has "
                                f"{getattr(self, name).shape[0]} rows, expected {n}")
        if n > 1 and not np.all(np.diff(t) > 0):
            raise DataError(f"subject {self.id!r}: times must be strictly increasing")
        for name in ("t", "y", "u", "V", "W", "X"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"subject {self.id!r}: non-finite values in {name}")

    @property
    def n(self):
        return len(self.t)

    def take(self, index):
        """Sub-subject restricted to the observation indices ``index``."""
        index = np.sort(np.asarray(index, dtype=int))
        return Subject(self.id, self.t[index], self.y[index], self.u,
                       self.V[index], self.W[index], self.X[index])


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from CSV header names to covariate roles.

    ``u_cols`` must be constant within a subject. Intercept flags prepend a
    column of ones to the corresponding block.
    """

    u_cols: tuple = ()
    v_cols: tuple = ()
    w_cols: tuple = ()
    x_cols: tuple = ("t",)
    u_intercept: bool = True
    v_intercept: bool = False
    w_intercept: bool = False
    id_col: str = "id"
    t_col: str = "t"
    y_col: str = "y"

    def __post_init__(self):
        for name in ("u_cols", "v_cols", "w_cols", "x_cols"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def names(self, role):
        cols = list(getattr(self, f"{role}_cols"))
        if getattr(self, f"{role}_intercept", False):
            cols = [INTERCEPT] + cols
        return cols

    def source_columns(self):
        """Header names that must be present, in first-use order."""
        seen = []
        for name in (self.id_col, self.t_col, self.y_col, *self.u_cols,
                     *self.v_cols, *self.w_cols, *self.x_cols):
            if name not in seen:
                seen.append(name)
        return seen

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Dataset:
    subjects: tuple
    schema: ColumnSchema = field(default_factory=ColumnSchema)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        if not subjects:
            raise DataError("a dataset needs at least one subject")
        dims = {(len(s.u), s.V.shape[1], s.W.shape[1], s.X.shape[1]) for s in subjects}
        if len(dims) != 1:
            raise DataError(f"covariate dimensions differ across subjects: {sorted(dims)}")
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise DataError("subject ids must be unique")

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, i):
        return self.subjects[i]

    @property
    def M(self):
        return len(self.subjects)

    @property
    def p_u(self):
        return len(self.subjects[0].u)

    @property
    def p_v(self):
        return self.subjects[0].V.shape[1]

    @property
    def p_w(self):
        return self.subjects[0].W.shape[1]

    @property
    def p_x(self):
        return self.subjects[0].X.shape[1]

    @property
    def n_obs(self):
        return sum(s.n for s in self.subjects)

    @property
    def t_range(self):
        return (min(float(s.t[0]) for s in self.subjects),
                max(float(s.t[-1]) for s in self.subjects))

    @cached_property
    def groups(self):
        """Group label per subject; subjects sharing a label have identical
        ``X`` and ``W`` and hence identical covariance matrices."""
        keys, labels = {}, []
        for s in self.subjects:
            key = (s.X.shape, s.X.tobytes(), s.W.tobytes())
            labels.append(keys.setdefault(key, len(keys)))
        return tuple(labels)

    def subset(self, index):
        return Dataset(tuple(self.subjects[i] for i in index), self.schema)

    def without(self, ids):
        ids = set(ids)
        return Dataset(tuple(s for s in self.subjects if s.id not in ids), self.schema)


def _parse_float(text, row, col):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise DataParseError(f"row {row}: column {col!r} has non-numeric value {text!r}",
                             row=row) from None
    if not math.isfinite(value):
        raise DataParseError(f"row {row}: column {col!r} is not finite ({text!r})", row=row)
    return value


def load_dataset(path, schema=None):
    """Read a long-format CSV (one row per subject and time) into a Dataset.

    Row numbers in error messages count data rows from 1 (the header is
    row 0).
    """
    schema = schema or ColumnSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in schema.source_columns() if c not in header]
        if missing:
            raise SchemaError(f"missing column(s) {missing} in {path}")
        numeric = [c for c in schema.source_columns() if c != schema.id_col]
        rows = {}
        for i, rec in enumerate(reader, start=1):
            sid = rec[schema.id_col]
            if sid is None or sid == "":
                raise DataParseError(f"row {i}: empty subject id", row=i)
            vals = {c: _parse_float(rec[c], i, c) for c in numeric}
            rows.setdefault(sid, []).append(vals)
    if not rows:
        raise DataError(f"{path} contains no data rows")
    subjects = []
    for sid, recs in rows.items():
        recs.sort(key=lambda r: r[schema.t_col])
        t = np.array([r[schema.t_col] for r in recs])
        if np.any(np.diff(t) == 0):
            dup = t[:-1][np.diff(t) == 0][0]
            raise DataError(f"duplicate (id, t) = ({sid!r}, {dup!r})")
        subjects.append(_build_subject(sid, recs, schema))
    return Dataset(tuple(subjects), schema)


def _block(recs, cols, intercept):
    n = len(recs)
    parts = [np.ones((n, 1))] if intercept else []
    if cols:
        parts.append(np.array([[r[c] for c in cols] for r in recs]))
    return np.hstack(parts) if parts else np.zeros((n, 0))


def _build_subject(sid, recs, schema):
    u_rows = _block(recs, schema.u_cols, schema.u_intercept)
    if np.any(u_rows != u_rows[0]):
        raise DataError(f"subject {sid!r}: u covariates vary over time")
    return Subject(
        id=sid,
        t=[r[schema.t_col] for r in recs],
        y=[r[schema.y_col] for r in recs],
        u=u_rows[0],
        V=_block(recs, schema.v_cols, schema.v_intercept),
        W=_block(recs, schema.w_cols, schema.w_intercept),
        X=_block(recs, schema.x_cols, False),
    )


def write_dataset(ds, path):
    """Write ``ds`` in the long format read by :func:`load_dataset`.

    Floats are written with ``repr`` so a reload reproduces every value
    bit for bit.
    """
    schema = ds.schema
    cols = schema.source_columns()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for s in ds:
            for i in range(s.n):
                writer.writerow([s.id if c == schema.id_col else repr(_lookup(s, schema, c, i))
                                 for c in cols])


def _lookup(s, schema, col, i):
    if col == schema.t_col:
        return float(s.t[i])
    if col == schema.y_col:
        return float(s.y[i])
    for role, mat in (("v", s.V), ("w", s.W), ("x", s.X)):
        names = schema.names(role)
        if col in names:
            return float(mat[i, names.index(col)])
    names = schema.names("u")
    return float(s.u[names.index(col)])


@dataclass(frozen=True)
class BasisConfig:
    """Clamped B-spline basis on ``domain``.

    ``knot_count`` is the number of interior knots, equally spaced on the
    open interval; boundary knots are repeated ``degree + 1`` times, so the
    basis has ``knot_count + degree + 1`` functions.
    """

    domain: tuple = (-4.0, 4.0)
    degree: int = 3
    knot_count: int = 18

    def __post_init__(self):
        lo, hi = (float(v) for v in self.domain)
        object.__setattr__(self, "domain", (lo, hi))
        if not lo < hi:
            raise ValueError(f"empty basis domain {self.domain}")
        if self.degree < 0 or self.knot_count < 0:
            raise ValueError("degree and knot_count must be non-negative")

    @property
    def n_basis(self):
        return self.knot_count + self.degree + 1

    @property
    def knots(self):
        lo, hi = self.domain
        interior = np.linspace(lo, hi, self.knot_count + 2)[1:-1]
        k = self.degree + 1
        return np.concatenate([np.full(k, lo), interior, np.full(k, hi)])


def build_bspline_basis(cfg, t):
    """Evaluate the ``D`` basis functions at ``t``; returns ``len(t) x D``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = cfg.domain
    if t.size and (t.min() < lo or t.max() > hi):
        raise DomainError(f"times outside basis domain [{lo}, {hi}]: "
                          f"[{t.min()}, {t.max()}]")
    if t.size == 0:
        return np.zeros((0, cfg.n_basis))
    return BSpline.design_matrix(t, cfg.knots, cfg.degree).toarray()


def mean_design(cfg, t, u, V):
    """Rows ``[u^T (x) Phi(t), V]`` of the mean design at arbitrary times."""
    u = np.asarray(u, dtype=float)
    Phi = build_bspline_basis(cfg, t)
    V = np.asarray(V, dtype=float).reshape(len(Phi), -1)
    return np.hstack([np.kron(u[None, :], Phi), V])


@dataclass(frozen=True)
class DesignMatrices:
    basis: BasisConfig
    A: tuple
    Phi: tuple
    p_u: int
    p_v: int
    rank_deficient: bool = False

    @property
    def n_beta(self):
        return self.basis.n_basis * self.p_u + self.p_v

    def split_beta(self, beta):
        """Unstack ``beta`` into ``(B, gamma)`` with ``B`` of shape ``D x p_u``."""
        D = self.basis.n_basis
        beta = np.asarray(beta, dtype=float)
        B = beta[:D * self.p_u].reshape(self.p_u, D).T
        return B, beta[D * self.p_u:]

    def stack_beta(self, B, gamma):
        return np.concatenate([np.asarray(B, dtype=float).T.ravel(),
                               np.asarray(gamma, dtype=float).ravel()])


def assemble_design(ds, cfg):
    Phi = tuple(build_bspline_basis(cfg, s.t) for s in ds)
    A = []
    for s, P in zip(ds, Phi):
        a = np.hstack([np.kron(s.u[None, :], P), s.V])
        a.setflags(write=False)
        A.append(a)
    stacked = np.vstack(A)
    deficient = bool(np.linalg.matrix_rank(stacked) < stacked.shape[1])
    if deficient:
        warnings.warn("stacked mean design is rank deficient; GLS solves will use "
                      "ridge jitter", RuntimeWarning, stacklevel=2)
    return DesignMatrices(cfg, tuple(A), Phi, ds.p_u, ds.p_v, deficient)


def default_basis(ds, degree=3, knot_count=18):
    return BasisConfig(ds.t_range, degree, knot_count)


def dataset_from_arrays(ids: Sequence, t, y, u=None, V=None, W=None, X=None,
                        schema=None):
    """Build a Dataset from per-subject array lists (no CSV round trip)."""
    subjects = []
    for i, sid in enumerate(ids):
        n = len(t[i])
        subjects.append(Subject(
            sid, t[i], y[i],
            u[i] if u is not None else [1.0],
            V[i] if V is not None else np.zeros((n, 0)),
            W[i] if W is not None else np.zeros((n, 0)),
            X[i] if X is not None else np.asarray(t[i], dtype=float)[:, None],
        ))
    return Dataset(tuple(subjects), schema or ColumnSchema())
