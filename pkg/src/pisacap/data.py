"""Data model, fold assignment, deterministic RNG streams, and CSV ingestion.

Everything downstream (cross-fitting, subgroup identification, perturbation
inference, simulation studies) consumes the types defined here.  Datasets and
fold assignments are immutable after construction and safe to share across
parallel workers; an RngStream is single-owner and must never be shared.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, SchemaError


@dataclass(frozen=True)
class Observation:
    """One subject: outcome y, treatment indicator g in {0,1}, covariates z."""

    y: float
    g: int
    z: np.ndarray


class Dataset:
    """An ordered sample of observations backed by numpy arrays.

    Attributes
    ----------
    y : (n,) float array of outcomes.
    g : (n,) int array of treatment indicators in {0,1}.
    z : (n, p) float array of covariates.
    ids : (n,) int array of stable 1-based row indices.
    """

    def __init__(self, y, g, z, ids=None):
        y = np.asarray(y, dtype=float)
        g = np.asarray(g, dtype=int)
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[0] != y.shape[0]:
            z = z.T
        n = y.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one row")
        if g.shape != (n,) or z.shape[0] != n:
            raise ValueError("y, g, z row counts disagree")
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite outcome value")
        if not np.all(np.isfinite(z)):
            raise ValueError("non-finite covariate value")
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("treatment indicator outside {0,1}")
        if ids is None:
            ids = np.arange(1, n + 1)
        self.y = y
        self.g = g
        self.z = z
        self.ids = np.asarray(ids, dtype=int)
        self.y.setflags(write=False)
        self.g.setflags(write=False)
        self.z.setflags(write=False)
        self.ids.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    def row(self, i: int) -> Observation:
        """Observation at 0-based position i."""
        return Observation(float(self.y[i]), int(self.g[i]), self.z[i])

    def observations(self):
        """Iterate rows in order as Observation records."""
        for i in range(self.n):
            yield self.row(i)

    def subset(self, indices) -> "Dataset":
        """New Dataset restricted to the given 0-based row positions."""
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.y[idx], self.g[idx], self.z[idx], ids=self.ids[idx])

    def has_both_arms(self) -> bool:
        return bool(self.g.min() == 0 and self.g.max() == 1)


class RngStream:
    """Deterministic random stream addressed by (master_seed, label path).

    Streams with distinct addresses are statistically independent, and a
    stream's output depends only on its address and draw index, never on
    scheduling order.  Built on the counter-based Philox generator keyed
    through numpy's SeedSequence spawn mechanism.
    """

    def __init__(self, master_seed: int, path: tuple[int, ...] = ()):
        self.master_seed = int(master_seed)
        self.path = tuple(int(x) for x in path)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, label: int) -> "RngStream":
        """Independent stream derived by appending a label to the address."""
        return RngStream(self.master_seed, self.path + (int(label),))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, path={self.path})"


def rng_child(parent: RngStream, label: int) -> RngStream:
    """Derive an independent child stream; pure in (parent address, label)."""
    return parent.child(label)


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of rows 0..n-1 into Q folds labeled 1..Q, sizes within one."""

    q_of: np.ndarray
    Q: int

    @property
    def n(self) -> int:
        return self.q_of.shape[0]

    def fold_indices(self, q: int) -> np.ndarray:
        """0-based row positions belonging to fold q."""
        return np.flatnonzero(self.q_of == q)

    def train_indices(self, q: int) -> np.ndarray:
        """0-based row positions outside fold q."""
        return np.flatnonzero(self.q_of != q)


def make_folds(n: int, Q: int, rng: RngStream) -> FoldAssignment:
    """Uniformly random partition into Q folds whose sizes differ by at most 1.

    Raises ValueError unless 2 <= Q <= n.
    """
    if Q < 2 or Q > n:
        raise ValueError(f"fold count Q={Q} must satisfy 2 <= Q <= n={n}")
    perm = rng.gen.permutation(n)
    q_of = np.empty(n, dtype=int)
    # dealing the shuffled rows round-robin forces sizes floor(n/Q)/ceil(n/Q)
    q_of[perm] = (np.arange(n) % Q) + 1
    q_of.setflags(write=False)
    return FoldAssignment(q_of=q_of, Q=Q)


def _expected_columns(p: int) -> list[str]:
    return ["y", "g"] + [f"z{j}" for j in range(1, p + 1)]


def load_dataset_csv(path, schema=None) -> Dataset:
    """Load a dataset from CSV with header ``y,g,z1,...,zp``.

    UTF-8, comma separated, decimal point, no missing values.  ``schema``
    optionally pins the expected column names; by default they are inferred
    from the header and validated against the y,g,z1..zp pattern.  Row
    numbers in error messages are 1-based data rows (excluding the header).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if schema is not None:
            expected = list(schema)
            if header != expected:
                raise SchemaError(
                    f"{path}: header {header} does not match schema {expected}"
                )
        else:
            if len(header) < 3 or header[:2] != ["y", "g"]:
                raise SchemaError(
                    f"{path}: header must start with y,g followed by z1..zp, got {header}"
                )
            expected = _expected_columns(len(header) - 2)
            if header != expected:
                raise SchemaError(
                    f"{path}: covariate columns must be named z1..zp in order, got {header}"
                )
        p = len(header) - 2
        ys, gs, zs = [], [], []
        for rownum, cells in enumerate(reader, start=1):
            if len(cells) != len(header):
                raise SchemaError(
                    f"{path}: row {rownum} has {len(cells)} cells, expected {len(header)}"
                )
            try:
                vals = [float(c) for c in cells]
            except ValueError as exc:
                raise ParseError(f"{path}: row {rownum}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"{path}: row {rownum}: non-finite value")
            gval = vals[1]
            if gval not in (0.0, 1.0):
                raise SchemaError(
                    f"{path}: row {rownum}: g value {cells[1]} is not 0 or 1"
                )
            ys.append(vals[0])
            gs.append(int(gval))
            zs.append(vals[2:])
    if not ys:
        raise SchemaError(f"{path}: no data rows")
    return Dataset(np.array(ys), np.array(gs), np.array(zs).reshape(len(ys), p))
