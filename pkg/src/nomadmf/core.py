"""Shared domain types, hyperparameters, and the global objective.

Everything downstream (the asynchronous engine, the baselines, the
evaluation harness) works against the types defined here.  Index
convention is 0-based throughout; file ingestion handles 1-based inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

REG_MODES = ("weighted", "plain")


class DimensionMismatchError(ValueError):
    """Operands disagree on a dimension (latent k, row count, ...)."""


@dataclass
class RatingEntry:
    """One observed rating: user row i, item column j, value A_ij.

    ``update_count`` is the number of SGD updates applied to this pair so
    far; it drives the per-pair step-size schedule and only ever grows
    within a run.
    """

    user: int
    item: int
    value: float
    update_count: int = 0


@dataclass
class HyperParams:
    """Model and schedule hyperparameters.

    lam is the regularization weight; alpha/beta parameterize the
    step-size decay schedule.  ``reg_mode`` selects whether normal
    equations scale the regularizer by the row degree (``weighted``,
    the default all solvers share) or use a constant (``plain``).
    """

    k: int
    lam: float = 0.05
    alpha: float = 0.012
    beta: float = 0.05
    reg_mode: str = "weighted"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.reg_mode not in REG_MODES:
            raise ValueError(f"reg_mode must be one of {REG_MODES}, got {self.reg_mode!r}")

    @property
    def weighted(self) -> bool:
        return self.reg_mode == "weighted"


class FactorMatrix:
    """Dense row-major parameter block: one k-vector per user or item row.

    Distinct rows may be written by distinct workers concurrently; a
    single row is only ever written by its owner.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionMismatchError("factor matrix must be 2-D (rows x k)")
        self.data = data

    @classmethod
    def zeros(cls, rows: int, k: int) -> "FactorMatrix":
        return cls(np.zeros((rows, k)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def k(self) -> int:
        return self.data.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.data[i]

    def copy(self) -> "FactorMatrix":
        return FactorMatrix(self.data.copy())

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self.data.astype(dtype)
        return self.data

    def __eq__(self, other):
        if isinstance(other, FactorMatrix):
            return self.data.shape == other.data.shape and bool(
                np.array_equal(self.data, other.data)
            )
        return NotImplemented

    def __repr__(self):
        return f"FactorMatrix(rows={self.rows}, k={self.k})"


def factor_array(mat) -> np.ndarray:
    """Accept a FactorMatrix or a bare 2-D ndarray and return the ndarray."""
    if isinstance(mat, FactorMatrix):
        return mat.data
    arr = np.asarray(mat, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError("expected a 2-D factor matrix")
    return arr


@dataclass
class NormalEquation:
    """The k x k system M x = b of a single-row least-squares subproblem."""

    M: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.M.ndim != 2 or self.M.shape[0] != self.M.shape[1]:
            raise DimensionMismatchError("M must be square")
        if self.b.shape != (self.M.shape[0],):
            raise DimensionMismatchError("b length must match M")


@dataclass
class Partition:
    """Assignment of user rows to p workers as disjoint covering blocks."""

    p: int
    assignment: np.ndarray  # row index -> worker id
    blocks: list[np.ndarray] = field(repr=False)

    @property
    def m(self) -> int:
        return self.assignment.shape[0]

    def block_bounds(self) -> list[tuple[int, int]]:
        """(start, end) per worker; valid for contiguous partitions only."""
        out = []
        for blk in self.blocks:
            if len(blk) == 0:
                out.append((0, 0))
            else:
                out.append((int(blk[0]), int(blk[-1]) + 1))
        return out


def partition_rows(m: int, p: int, row_counts: np.ndarray | None = None) -> Partition:
    """Split rows {0..m-1} into p contiguous blocks.

    Default strategy gives blocks of size ceil(m/p) or floor(m/p).  When
    ``row_counts`` (ratings per row) is supplied, block boundaries are
    instead chosen greedily so each block carries roughly the same number
    of ratings.
    """
    if p < 1:
        raise ValueError(f"worker count must be >= 1, got {p}")
    if p > m:
        raise ValueError(f"worker count {p} exceeds row count {m}")

    assignment = np.empty(m, dtype=np.int32)
    blocks: list[np.ndarray] = []
    if row_counts is None:
        base, extra = divmod(m, p)
        start = 0
        for q in range(p):
            size = base + (1 if q < extra else 0)
            blocks.append(np.arange(start, start + size))
            assignment[start : start + size] = q
            start += size
    else:
        row_counts = np.asarray(row_counts)
        if row_counts.shape != (m,):
            raise DimensionMismatchError("row_counts must have one entry per row")
        total = float(row_counts.sum())
        cum = np.cumsum(row_counts, dtype=np.float64)
        start = 0
        for q in range(p):
            if q == p - 1:
                end = m
            else:
                target = total * (q + 1) / p
                end = int(np.searchsorted(cum, target, side="left")) + 1
                # leave enough rows for the remaining workers
                end = min(end, m - (p - 1 - q))
                end = max(end, start + 1)
            blocks.append(np.arange(start, end))
            assignment[start:end] = q
            start = end
    return Partition(p=p, assignment=assignment, blocks=blocks)


class ShardedRatings:
    """The observed entries, laid out for every solver at once.

    The canonical entry order is shard order: entries sorted by
    (worker, item, user).  The asynchronous engine walks per-worker
    per-item slices of that layout; per-entry update counters live in
    the same order.  Row- and column-compressed views are kept for the
    normal-equation solvers and the objective.
    """

    def __init__(
        self,
        m: int,
        n: int,
        users: np.ndarray,
        items: np.ndarray,
        values: np.ndarray,
        partition: Partition,
    ):
        nnz = len(values)
        if not (len(users) == len(items) == nnz):
            raise DimensionMismatchError("users/items/values lengths differ")
        if partition.m != m:
            raise DimensionMismatchError(
                f"partition covers {partition.m} rows but m={m}"
            )
        self.m = int(m)
        self.n = int(n)
        self.nnz = int(nnz)
        self.partition = partition
        p = partition.p

        worker_of = partition.assignment[users]
        order = np.lexsort((users, items, worker_of))
        self.users = np.ascontiguousarray(users[order], dtype=np.int32)
        self.items = np.ascontiguousarray(items[order], dtype=np.int32)
        self.values = np.ascontiguousarray(values[order], dtype=np.float64)
        self.update_counts = np.zeros(nnz, dtype=np.uint32)

        wsorted = worker_of[order]
        self.shard_ptr = np.zeros(p + 1, dtype=np.int64)
        np.add.at(self.shard_ptr[1:], wsorted, 1)
        self.shard_ptr = np.cumsum(self.shard_ptr)
        # per-worker CSC over items, indices local to the worker's slice
        self.item_ptr = np.zeros((p, n + 1), dtype=np.int64)
        for q in range(p):
            lo, hi = self.shard_ptr[q], self.shard_ptr[q + 1]
            counts = np.bincount(self.items[lo:hi], minlength=n)
            self.item_ptr[q, 1:] = np.cumsum(counts)

        # row-compressed view (canonical for residuals)
        row_order = np.lexsort((items, users))
        self.row_ptr = np.zeros(m + 1, dtype=np.int64)
        np.add.at(self.row_ptr[1:], users, 1)
        self.row_ptr = np.cumsum(self.row_ptr)
        self.row_items = np.ascontiguousarray(items[row_order], dtype=np.int32)
        self.row_vals = np.ascontiguousarray(values[row_order], dtype=np.float64)
        self.row_users = np.ascontiguousarray(users[row_order], dtype=np.int32)

        # column-compressed view + permutation back into row order
        col_order = np.lexsort((users, items))
        self.col_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.col_ptr[1:], items, 1)
        self.col_ptr = np.cumsum(self.col_ptr)
        self.col_users = np.ascontiguousarray(users[col_order], dtype=np.int32)
        self.col_vals = np.ascontiguousarray(values[col_order], dtype=np.float64)
        inv_row = np.empty(nnz, dtype=np.int64)
        inv_row[row_order] = np.arange(nnz)
        self.col_to_row = np.ascontiguousarray(inv_row[col_order])

        self.row_degrees = np.diff(self.row_ptr).astype(np.int64)
        self.col_degrees = np.diff(self.col_ptr).astype(np.int64)

    @property
    def p(self) -> int:
        return self.partition.p

    def worker_slice(self, q: int) -> tuple[int, int]:
        return int(self.shard_ptr[q]), int(self.shard_ptr[q + 1])

    def item_slice(self, q: int, j: int) -> tuple[int, int]:
        """Global [start, end) bounds of worker q's slice of column j."""
        base = self.shard_ptr[q]
        return int(base + self.item_ptr[q, j]), int(base + self.item_ptr[q, j + 1])

    def entry(self, idx: int) -> RatingEntry:
        return RatingEntry(
            user=int(self.users[idx]),
            item=int(self.items[idx]),
            value=float(self.values[idx]),
            update_count=int(self.update_counts[idx]),
        )

    def reset_update_counts(self) -> None:
        self.update_counts[:] = 0

    def check_shards(self) -> None:
        """Assert the shards exactly partition the entries."""
        for q in range(self.p):
            lo, hi = self.worker_slice(q)
            users = self.users[lo:hi]
            if len(users) and not np.all(self.partition.assignment[users] == q):
                raise AssertionError(f"worker {q} shard holds foreign user rows")
        per_item = np.zeros(self.n, dtype=np.int64)
        for q in range(self.p):
            per_item += self.item_ptr[q, 1:] - self.item_ptr[q, :-1]
        if not np.array_equal(per_item, self.col_degrees):
            raise AssertionError("per-item slice counts do not sum to column degrees")


def step_size(params: HyperParams, t: int) -> float:
    """Step for the t-th update of a pair: alpha / (1 + beta * t^1.5)."""
    if t < 0:
        raise ValueError("update count must be non-negative")
    return params.alpha / (1.0 + params.beta * float(t) ** 1.5)


def predict(w: np.ndarray, h: np.ndarray) -> float:
    """Predicted rating: the inner product of the two embeddings."""
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if w.shape != h.shape:
        raise DimensionMismatchError(f"length mismatch: {w.shape} vs {h.shape}")
    return float(np.dot(w, h))


def _reg_weights(data: ShardedRatings, params: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    if params.weighted:
        return data.row_degrees.astype(np.float64), data.col_degrees.astype(np.float64)
    return np.ones(data.m), np.ones(data.n)


def objective(W, H, data: ShardedRatings, params: HyperParams) -> float:
    """Regularized squared-error objective J(W, H) over the observed entries.

    Summation runs in the canonical shard order (workers in id order,
    items then users within each shard), so the value is exactly
    reproducible for a given shard layout regardless of how the input
    entries were originally ordered.
    """
    Wd = factor_array(W)
    Hd = factor_array(H)
    if Wd.shape[0] != data.m or Hd.shape[0] != data.n:
        raise DimensionMismatchError(
            f"factors ({Wd.shape[0]}x{Wd.shape[1]}, {Hd.shape[0]}x{Hd.shape[1]}) "
            f"do not match data ({data.m}x{data.n})"
        )
    if Wd.shape[1] != Hd.shape[1]:
        raise DimensionMismatchError("W and H disagree on k")
    resid = data.values - np.einsum(
        "ij,ij->i", Wd[data.users], Hd[data.items], optimize=False
    )
    cw, ch = _reg_weights(data, params)
    reg = float(cw @ np.einsum("ij,ij->i", Wd, Wd)) + float(
        ch @ np.einsum("ij,ij->i", Hd, Hd)
    )
    return 0.5 * float(resid @ resid) + 0.5 * params.lam * reg


def objective_gradient(W, H, data: ShardedRatings, params: HyperParams):
    """Exact gradient of ``objective`` with respect to W and H."""
    Wd = factor_array(W)
    Hd = factor_array(H)
    resid = data.values - np.einsum("ij,ij->i", Wd[data.users], Hd[data.items])
    gW = np.zeros_like(Wd)
    gH = np.zeros_like(Hd)
    np.add.at(gW, data.users, -resid[:, None] * Hd[data.items])
    np.add.at(gH, data.items, -resid[:, None] * Wd[data.users])
    cw, ch = _reg_weights(data, params)
    gW += params.lam * cw[:, None] * Wd
    gH += params.lam * ch[:, None] * Hd
    return gW, gH
