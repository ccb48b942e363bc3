"""Numerical update rules: SGD pair updates, least-squares row solves,
coordinate-descent updates, and the rank-wise residual-maintenance sweep.

The hot loops are numba-compiled and release the GIL so worker threads
can overlap.  Public functions validate and delegate to the jitted
internals; the internals are also called directly by the engine and the
baseline drivers on the shared array layout of ShardedRatings.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .core import (
    DimensionMismatchError,
    HyperParams,
    NormalEquation,
    ShardedRatings,
    factor_array,
)


class SingularSystemError(np.linalg.LinAlgError):
    """A normal-equation solve hit a singular or indefinite system."""

    def __init__(self, message: str, index: int | None = None, axis: str | None = None):
        super().__init__(message)
        self.index = index
        self.axis = axis


# --------------------------------------------------------------------------
# jitted internals
# --------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _chol_solve_inplace(M, x):
    """Cholesky-factor M in place and solve M x = b (b passed in x).

    Returns False when M is not positive definite.
    """
    k = M.shape[0]
    for c in range(k):
        s = M[c, c]
        for j in range(c):
            s -= M[c, j] * M[c, j]
        if s <= 0.0:
            return False
        d = math.sqrt(s)
        M[c, c] = d
        for r in range(c + 1, k):
            s2 = M[r, c]
            for j in range(c):
                s2 -= M[r, j] * M[c, j]
            M[r, c] = s2 / d
    for r in range(k):
        s = x[r]
        for j in range(r):
            s -= M[r, j] * x[j]
        x[r] = s / M[r, r]
    for r in range(k - 1, -1, -1):
        s = x[r]
        for j in range(r + 1, k):
            s -= M[j, r] * x[j]
        x[r] = s / M[r, r]
    return True


@njit(cache=True, nogil=True)
def _als_sweep(out, other, ptr, idx, vals, lam, weighted):
    """Solve every row subproblem of one factor given the other.

    Returns -1 on success, or the index of the first row whose system is
    singular (no ratings and no regularizer, or an indefinite Gram).
    Rows with no ratings but lam > 0 are set to zero, which is the exact
    minimizer in both regularization modes.
    """
    rows = out.shape[0]
    k = out.shape[1]
    M = np.empty((k, k))
    b = np.empty(k)
    for r in range(rows):
        lo = ptr[r]
        hi = ptr[r + 1]
        deg = hi - lo
        if deg == 0:
            if lam > 0.0:
                for l in range(k):
                    out[r, l] = 0.0
                continue
            return r
        for l in range(k):
            b[l] = 0.0
            for l2 in range(k):
                M[l, l2] = 0.0
        for e in range(lo, hi):
            h = other[idx[e]]
            a = vals[e]
            for l in range(k):
                hl = h[l]
                b[l] += a * hl
                for l2 in range(l, k):
                    M[l, l2] += hl * h[l2]
        c = float(deg) if weighted else 1.0
        lamc = lam * c
        for l in range(k):
            M[l, l] += lamc
            for l2 in range(l + 1, k):
                M[l2, l] = M[l, l2]
        if not _chol_solve_inplace(M, b):
            return r
        for l in range(k):
            out[r, l] = b[l]
    return -1


@njit(cache=True, nogil=True)
def _sgd_column(
    W,
    Hbuf,
    j,
    users,
    vals,
    counts,
    lo,
    hi,
    reg_w,
    reg_h,
    alpha,
    beta,
    trace_on,
    tr_entry,
    tr_t,
    tr_s,
    tr_pos,
):
    """Apply the SGD pair update to every local rating of column j.

    Entries are walked in shard storage order (ascending user).  The
    residual is computed from the old vectors and both vectors are
    updated simultaneously.  Per-entry counters select the step size and
    are incremented in place.  ``reg_w``/``reg_h`` hold the per-row
    shrink coefficients (a constant lambda under weighted regularization,
    lambda over the degree under plain).  Returns the new trace cursor.
    """
    h = Hbuf[j]
    k = h.shape[0]
    lam_h = reg_h[j]
    for e in range(lo, hi):
        i = users[e]
        t = np.float64(counts[e])
        s = alpha / (1.0 + beta * t**1.5)
        counts[e] = counts[e] + np.uint32(1)
        lam_w = reg_w[i]
        w = W[i]
        r = vals[e]
        d = 0.0
        for l in range(k):
            d += w[l] * h[l]
        r -= d
        for l in range(k):
            wl = w[l]
            hl = h[l]
            w[l] = wl + s * (r * hl - lam_w * wl)
            h[l] = hl + s * (r * wl - lam_h * hl)
        if trace_on:
            tr_entry[tr_pos] = e
            tr_t[tr_pos] = counts[e]
            tr_s[tr_pos] = s
            tr_pos += 1
    return tr_pos


@njit(cache=True, nogil=True)
def _sgd_parcels(
    batch,
    n_parcels,
    remaining,
    W,
    Hbuf,
    versions,
    users,
    vals,
    counts,
    item_ptr,
    base,
    reg_w,
    reg_h,
    alpha,
    beta,
    trace_on,
    tr_entry,
    tr_t,
    tr_s,
    tr_pos,
    tr_item,
    tr_ver,
    tr_nloc,
    tr_ppos,
):
    """Process a drained run of parcels back to back.

    Equivalent to calling _sgd_column once per parcel, but amortizes the
    interpreter overhead so worker threads spend their time in nogil
    code.  ``remaining`` caps the update count at a parcel boundary
    (negative means uncapped); parcels beyond the cap are left untouched
    and reported via the returned count.  Versions and trace rows are
    maintained in place.  Returns (parcels done, updates done, update
    trace cursor, processing trace cursor).
    """
    done = 0
    nupd = 0
    for b in range(n_parcels):
        if remaining >= 0 and nupd >= remaining:
            break
        j = batch[b]
        lo = base + item_ptr[j]
        hi = base + item_ptr[j + 1]
        tr_pos = _sgd_column(
            W, Hbuf, j, users, vals, counts, lo, hi, reg_w, reg_h,
            alpha, beta, trace_on, tr_entry, tr_t, tr_s, tr_pos,
        )
        versions[j] += 1
        if trace_on:
            tr_item[tr_ppos] = j
            tr_ver[tr_ppos] = versions[j]
            tr_nloc[tr_ppos] = hi - lo
            tr_ppos += 1
        done += 1
        nupd += hi - lo
    return done, nupd, tr_pos, tr_ppos


@njit(cache=True, nogil=True)
def _sgd_entries(W, H, users, items, vals, counts, order, reg_w, reg_h, alpha, beta, use_schedule, fixed_step):
    """SGD sweep over entries in the given order (single-threaded).

    ``use_schedule`` selects the per-pair decay schedule; otherwise the
    constant ``fixed_step`` is used (bold-driver style).  Counters are
    incremented either way.
    """
    k = W.shape[1]
    for oi in range(order.shape[0]):
        e = order[oi]
        i = users[e]
        j = items[e]
        if use_schedule:
            t = np.float64(counts[e])
            s = alpha / (1.0 + beta * t**1.5)
        else:
            s = fixed_step
        counts[e] = counts[e] + np.uint32(1)
        w = W[i]
        h = H[j]
        lam_w = reg_w[i]
        lam_h = reg_h[j]
        r = vals[e]
        d = 0.0
        for l in range(k):
            d += w[l] * h[l]
        r -= d
        for l in range(k):
            wl = w[l]
            hl = h[l]
            w[l] = wl + s * (r * hl - lam_w * wl)
            h[l] = hl + s * (r * wl - lam_h * hl)
    return order.shape[0]


@njit(cache=True, nogil=True)
def _ccd_rank_rows(Rhat, row_ptr, row_items, hcol, wcol, lam, weighted):
    """Exact single-coordinate minimization of all w_il for one rank."""
    m = row_ptr.shape[0] - 1
    for i in range(m):
        lo = row_ptr[i]
        hi = row_ptr[i + 1]
        num = 0.0
        den = 0.0
        for e in range(lo, hi):
            hv = hcol[row_items[e]]
            num += Rhat[e] * hv
            den += hv * hv
        c = float(hi - lo) if weighted else 1.0
        den += lam * c
        wcol[i] = num / den if den > 0.0 else 0.0


@njit(cache=True, nogil=True)
def _ccd_rank_cols(Rhat, col_ptr, col_users, col_to_row, wcol, hcol, lam, weighted):
    """Exact single-coordinate minimization of all h_jl for one rank."""
    n = col_ptr.shape[0] - 1
    for j in range(n):
        lo = col_ptr[j]
        hi = col_ptr[j + 1]
        num = 0.0
        den = 0.0
        for e in range(lo, hi):
            wv = wcol[col_users[e]]
            num += Rhat[col_to_row[e]] * wv
            den += wv * wv
        c = float(hi - lo) if weighted else 1.0
        den += lam * c
        hcol[j] = num / den if den > 0.0 else 0.0


def sgd_reg_weights(data: ShardedRatings, params: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-row shrink coefficients for the SGD kernels.

    Weighted mode shrinks every visit by lambda (the per-sample gradient
    of the degree-weighted objective); plain mode spreads the total
    penalty over a row's visits, shrinking by lambda / degree.
    """
    if params.weighted:
        return (
            np.full(data.m, params.lam),
            np.full(data.n, params.lam),
        )
    reg_w = np.zeros(data.m)
    reg_h = np.zeros(data.n)
    np.divide(params.lam, data.row_degrees, out=reg_w, where=data.row_degrees > 0)
    np.divide(params.lam, data.col_degrees, out=reg_h, where=data.col_degrees > 0)
    return reg_w, reg_h


def warm_up() -> None:
    """Force compilation of the jitted kernels on trivial inputs.

    Called once before worker threads start so no thread pays the
    compilation cost (or races the dispatcher) mid-run.
    """
    W = np.zeros((1, 2))
    H = np.zeros((1, 2))
    users = np.zeros(1, dtype=np.int32)
    vals = np.zeros(1)
    reg = np.zeros(1)
    counts = np.zeros(1, dtype=np.uint32)
    dummy_i = np.zeros(1, dtype=np.int64)
    dummy_t = np.zeros(1, dtype=np.uint32)
    dummy_s = np.zeros(1)
    _sgd_column(W, H, 0, users, vals, counts, 0, 1, reg, reg, 1.0, 0.0, False, dummy_i, dummy_t, dummy_s, 0)
    batch = np.zeros(1, dtype=np.int64)
    versions = np.zeros(1, dtype=np.int64)
    ptr = np.array([0, 1], dtype=np.int64)
    dummy_item = np.zeros(1, dtype=np.int32)
    dummy_nloc = np.zeros(1, dtype=np.int32)
    _sgd_parcels(
        batch, 1, -1, W, H, versions, users, vals, counts, ptr, 0, reg, reg,
        1.0, 0.0, False, dummy_i, dummy_t, dummy_s, 0, dummy_item, versions, dummy_nloc, 0,
    )
    order = np.zeros(1, dtype=np.int64)
    _sgd_entries(W, H, users, users, vals, counts, order, reg, reg, 1.0, 0.0, True, 0.0)
    _als_sweep(W, H, ptr, users, vals, 1.0, True)
    _ccd_rank_rows(vals, ptr, users, H[:, 0], W[:, 0], 1.0, True)
    _ccd_rank_cols(vals, ptr, users, dummy_i, W[:, 0], H[:, 0], 1.0, True)


# --------------------------------------------------------------------------
# public operations
# --------------------------------------------------------------------------


def sgd_update_pair(w, h, a: float, lam: float, s: float):
    """One stochastic gradient step on a single rating.

    Computes the residual from the old vectors and moves both vectors in
    the descent direction simultaneously:

        w' = w + s * (e * h - lam * w)
        h' = h + s * (e * w - lam * h),   e = a - <w, h>.

    Returns new arrays; the inputs are not modified.
    """
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if w.shape != h.shape or w.ndim != 1:
        raise DimensionMismatchError(f"vector shapes differ: {w.shape} vs {h.shape}")
    if s <= 0:
        raise ValueError(f"step size must be positive, got {s}")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(h)) and math.isfinite(a) and math.isfinite(lam)):
        raise ValueError("non-finite input to sgd_update_pair")
    e = a - float(np.dot(w, h))
    w_new = w + s * (e * h - lam * w)
    h_new = h + s * (e * w - lam * h)
    return w_new, h_new


def build_normal_equation(
    h_rows,
    values,
    lam: float,
    reg_mode: str = "weighted",
    k: int | None = None,
) -> NormalEquation:
    """Gram system of one row subproblem: M = H'H + lam*c*I, b = H'a.

    c is the number of ratings in the row under ``weighted`` mode and 1
    under ``plain`` mode.
    """
    h_rows = np.atleast_2d(np.asarray(h_rows, dtype=np.float64))
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        h_rows = h_rows.reshape(0, h_rows.shape[-1] if h_rows.size else 0)
        if k is None or k < 1:
            raise DimensionMismatchError("k required to build an empty-row system")
        if lam <= 0:
            raise SingularSystemError("no ratings and no regularizer: singular system")
        c = 0.0 if reg_mode == "weighted" else 1.0
        return NormalEquation(M=lam * c * np.eye(k), b=np.zeros(k))
    if h_rows.shape[0] != values.shape[0]:
        raise DimensionMismatchError(
            f"{h_rows.shape[0]} factor rows vs {values.shape[0]} values"
        )
    if k is not None and k != h_rows.shape[1]:
        raise DimensionMismatchError(f"k={k} but factor rows have length {h_rows.shape[1]}")
    if lam == 0 and reg_mode not in ("weighted", "plain"):
        raise ValueError(f"unknown reg_mode {reg_mode!r}")
    c = float(values.shape[0]) if reg_mode == "weighted" else 1.0
    M = h_rows.T @ h_rows + lam * c * np.eye(h_rows.shape[1])
    b = h_rows.T @ values
    return NormalEquation(M=M, b=b)


def als_solve_row(eq: NormalEquation) -> np.ndarray:
    """Solve M x = b by Cholesky factorization (M must be positive definite)."""
    M = eq.M.copy()
    x = eq.b.copy()
    if not _chol_solve_inplace(M, x):
        raise SingularSystemError("normal-equation matrix is singular or indefinite")
    return x


def ccd_coordinate_update(w, l: int, eq: NormalEquation) -> float:
    """Exact minimizer of the row quadratic along coordinate l.

    Returns the new value w_l - (<m_l, w> - b_l) / m_ll; the other
    coordinates of w are read but not changed.
    """
    w = np.asarray(w, dtype=np.float64)
    if not 0 <= l < eq.M.shape[0]:
        raise IndexError(f"coordinate {l} out of range for k={eq.M.shape[0]}")
    m_ll = eq.M[l, l]
    if m_ll == 0:
        raise SingularSystemError("zero curvature along coordinate", index=l)
    return float(w[l] - (float(eq.M[l] @ w) - float(eq.b[l])) / m_ll)


class ResidualMatrix:
    """R_ij = A_ij - <w_i, h_j> on the observed pattern, in row order.

    The rank-wise sweep keeps this incrementally up to date; ``drift``
    measures the divergence from a from-scratch recomputation.
    """

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)

    @classmethod
    def from_factors(cls, W, H, data: ShardedRatings) -> "ResidualMatrix":
        return cls(cls.recompute(W, H, data))

    @staticmethod
    def recompute(W, H, data: ShardedRatings) -> np.ndarray:
        Wd = factor_array(W)
        Hd = factor_array(H)
        pred = np.einsum("ij,ij->i", Wd[data.row_users], Hd[data.row_items])
        return data.row_vals - pred

    def drift(self, W, H, data: ShardedRatings) -> float:
        """Max per-entry deviation from scratch, relative to the rating scale."""
        fresh = self.recompute(W, H, data)
        scale = max(1.0, float(np.max(np.abs(data.row_vals))) if data.nnz else 1.0)
        if len(fresh) == 0:
            return 0.0
        return float(np.max(np.abs(fresh - self.values))) / scale


def ccdpp_epoch(
    W,
    H,
    data: ShardedRatings,
    residual: ResidualMatrix,
    params: HyperParams,
    inner_iters: int = 1,
    check: bool = False,
):
    """One rank-wise sweep: for each latent rank, refit the rank-one
    subproblem against the rank-removed residual, then restore the
    residual.  Updates W and H in place and returns (W, H, residual).
    """
    Wd = factor_array(W)
    Hd = factor_array(H)
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    if residual.values.shape != (data.nnz,):
        raise ValueError("residual does not match the data sparsity pattern")
    if check and residual.drift(Wd, Hd, data) > 1e-9:
        raise ValueError("residual inconsistent with factors")
    weighted = params.weighted
    rows_of_entry = data.row_users
    cols_of_entry = data.row_items
    R = residual.values
    for l in range(Wd.shape[1]):
        wcol = Wd[:, l].copy()
        hcol = Hd[:, l].copy()
        Rhat = R + wcol[rows_of_entry] * hcol[cols_of_entry]
        for _ in range(inner_iters):
            _ccd_rank_rows(Rhat, data.row_ptr, data.row_items, hcol, wcol, params.lam, weighted)
            _ccd_rank_cols(
                Rhat, data.col_ptr, data.col_users, data.col_to_row, wcol, hcol, params.lam, weighted
            )
        Wd[:, l] = wcol
        Hd[:, l] = hcol
        R = Rhat - wcol[rows_of_entry] * hcol[cols_of_entry]
    residual.values = R
    return W, H, residual
