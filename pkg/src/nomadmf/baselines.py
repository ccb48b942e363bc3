"""Reference optimizers: serial SGD, stratified block-synchronous SGD
(DSGD) with a bold-driver step, and the CCD++ and ALS sweep drivers.

All four minimize the same degree-weighted objective as the asynchronous
engine (ALS and CCD++ also accept plain regularization), so their
convergence curves are directly comparable.  DSGD is simulated in one
process with logical workers; its strata make the per-sub-epoch cells
disjoint in both users and items, so sequential execution is equivalent
to the parallel schedule.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    HyperParams,
    ShardedRatings,
    objective,
    partition_rows,
)
from .evaluate import ConvergenceLog, test_rmse
from .kernels import SingularSystemError
from .nomad import RunControl, init_factors

SERIAL_ORDERS = ("permutation", "uniform", "column")


@dataclass
class BoldDriver:
    """Objective-monitoring step adaptation: grow on decrease, cut otherwise."""

    current_step: float
    increase_factor: float = 1.05
    decrease_factor: float = 0.5
    last_objective: float = math.inf

    def __post_init__(self):
        if self.current_step <= 0:
            raise ValueError("step must be positive")
        if not (self.increase_factor > 0 and self.decrease_factor > 0):
            raise ValueError("factors must be positive")


def bold_driver_step(driver: BoldDriver, new_objective: float) -> float:
    """Update the step after an epoch; ties count as non-decrease."""
    if not math.isfinite(new_objective):
        raise ValueError(f"non-finite objective {new_objective}")
    if new_objective < driver.last_objective:
        driver.current_step *= driver.increase_factor
    else:
        driver.current_step *= driver.decrease_factor
    driver.last_objective = new_objective
    return driver.current_step


@dataclass
class StratumPlan:
    """One epoch of DSGD strata: stratum s maps worker q to an item block
    such that no two workers share a user or item block within a stratum."""

    p: int
    strata: list[list[int]] = field(repr=False)

    def validate(self) -> None:
        seen_cells = set()
        for stratum in self.strata:
            if sorted(stratum) != list(range(self.p)):
                raise ValueError("stratum is not a bijection onto item blocks")
            for q, jb in enumerate(stratum):
                seen_cells.add((q, jb))
        if len(seen_cells) != self.p * len(self.strata):
            raise ValueError("duplicate cell within an epoch")


def make_stratum_plan(p: int, offset: int) -> StratumPlan:
    """Diagonal rotation: stratum s sends worker q to block (q+s+offset) mod p."""
    strata = [[(q + s + offset) % p for q in range(p)] for s in range(p)]
    plan = StratumPlan(p=p, strata=strata)
    plan.validate()
    return plan


def _log_metadata(solver: str, params: HyperParams, seed: int, **extra) -> dict:
    meta = {
        "solver": solver,
        "seed": str(seed),
        "k": str(params.k),
        "lambda": repr(params.lam),
        "alpha": repr(params.alpha),
        "beta": repr(params.beta),
    }
    meta.update({key: str(val) for key, val in extra.items()})
    return meta


class _EpochClock:
    """Accumulates solver time, excluding metric evaluation."""

    def __init__(self):
        self.total = 0.0
        self._t0 = None

    def start(self):
        self._t0 = time.perf_counter()

    def pause(self) -> float:
        self.total += time.perf_counter() - self._t0
        self._t0 = None
        return self.total


def _epoch_budget(control: RunControl, nnz: int) -> tuple[int | None, float | None, float | None]:
    cap = control.budget_updates(nnz)
    return cap, control.seconds, control.rmse_target


def run_serial_sgd(
    data: ShardedRatings,
    params: HyperParams,
    control: RunControl,
    seed: int = 0,
    test=None,
    order: str = "permutation",
):
    """Single-threaded SGD with the per-pair step schedule.

    ``order`` picks the sampling scheme per epoch: a fresh random
    permutation of the entries, uniform sampling with replacement, or a
    fixed ascending column sweep.  The column sweep walks the worker-0
    shard with the same kernel and the same item order as the
    single-worker asynchronous engine, so the two produce bitwise
    identical factors for equal seeds and budgets.
    """
    if order not in SERIAL_ORDERS:
        raise ValueError(f"order must be one of {SERIAL_ORDERS}")
    if order == "column" and data.p != 1:
        raise ValueError("column order requires data sharded for one worker")
    kernels.warm_up()
    W, H = init_factors(data.m, data.n, params.k, seed)
    data.reset_update_counts()
    reg_w, reg_h = kernels.sgd_reg_weights(data, params)
    rng = np.random.default_rng((seed, 4))
    log = ConvergenceLog(metadata=_log_metadata("serial_sgd", params, seed, order=order))
    rmse0 = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
    log.append(0.0, 0, objective(W, H, data, params), rmse0)

    cap, seconds, rmse_target = _epoch_budget(control, data.nnz)
    dummy_i = np.empty(0, dtype=np.int64)
    dummy_t = np.empty(0, dtype=np.uint32)
    dummy_s = np.empty(0, dtype=np.float64)
    done = 0
    clock = _EpochClock()
    while True:
        if cap is not None and done >= cap:
            break
        if seconds is not None and clock.total >= seconds:
            break
        clock.start()
        if order == "column":
            base = int(data.shard_ptr[0])
            ptr = data.item_ptr[0]
            for j in range(data.n):
                if cap is not None and done >= cap:
                    break
                lo = base + ptr[j]
                hi = base + ptr[j + 1]
                kernels._sgd_column(
                    W.data, H.data, j, data.users, data.values, data.update_counts,
                    lo, hi, reg_w, reg_h, params.alpha, params.beta,
                    False, dummy_i, dummy_t, dummy_s, 0,
                )
                done += hi - lo
        else:
            if order == "permutation":
                sweep = rng.permutation(data.nnz)
            else:
                sweep = rng.integers(0, data.nnz, size=data.nnz)
            if cap is not None:
                sweep = sweep[: cap - done]
            done += kernels._sgd_entries(
                W.data, H.data, data.users, data.items, data.values,
                data.update_counts, np.ascontiguousarray(sweep, dtype=np.int64),
                reg_w, reg_h, params.alpha, params.beta, True, 0.0,
            )
        elapsed = clock.pause()
        rmse = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
        if done > log.records[-1].total_updates:
            log.append(elapsed, done, objective(W, H, data, params), rmse)
        if rmse_target is not None and rmse <= rmse_target:
            break
        if control.stop_flag.is_set():
            break
        if data.nnz == 0:
            break
    return W, H, log


def run_dsgd(
    data: ShardedRatings,
    params: HyperParams,
    p: int,
    control: RunControl,
    seed: int = 0,
    test=None,
    collect_audit: bool = False,
):
    """Stratified block-synchronous SGD with a bold-driver global step.

    Users and items are split into p contiguous blocks.  Each epoch runs
    p sub-epochs; in each, every logical worker sweeps one disjoint
    (user-block, item-block) cell in a seeded random order, with a
    barrier (here: sequential execution) between sub-epochs.  The item
    blocks rotate diagonally with a fresh random offset per epoch, and
    the bold driver rescales the step once per epoch from the training
    objective.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    kernels.warm_up()
    W, H = init_factors(data.m, data.n, params.k, seed)
    data.reset_update_counts()
    reg_w, reg_h = kernels.sgd_reg_weights(data, params)
    rng = np.random.default_rng((seed, 5))
    user_part = partition_rows(data.m, p)
    item_part = partition_rows(data.n, p)

    # bucket entry indices by (user block, item block)
    ub = user_part.assignment[data.users]
    ib = item_part.assignment[data.items]
    cell_of_entry = ub.astype(np.int64) * p + ib
    order = np.argsort(cell_of_entry, kind="stable")
    cell_sorted = cell_of_entry[order]
    cell_ptr = np.searchsorted(cell_sorted, np.arange(p * p + 1))

    log = ConvergenceLog(metadata=_log_metadata("dsgd", params, seed, p=p))
    rmse0 = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
    J = objective(W, H, data, params)
    log.append(0.0, 0, J, rmse0)
    driver = BoldDriver(current_step=params.alpha, last_objective=J)

    cap, seconds, rmse_target = _epoch_budget(control, data.nnz)
    audit: list[list[tuple[int, int]]] = []
    done = 0
    clock = _EpochClock()
    while True:
        if cap is not None and done >= cap:
            break
        if seconds is not None and clock.total >= seconds:
            break
        if data.nnz == 0:
            break
        clock.start()
        plan = make_stratum_plan(p, int(rng.integers(p)))
        step = driver.current_step
        for stratum in plan.strata:
            if collect_audit:
                audit.append([(q, stratum[q]) for q in range(p)])
            for q in range(p):
                cell = q * p + stratum[q]
                lo, hi = cell_ptr[cell], cell_ptr[cell + 1]
                if lo == hi:
                    continue
                sweep = order[lo:hi][rng.permutation(hi - lo)]
                done += kernels._sgd_entries(
                    W.data, H.data, data.users, data.items, data.values,
                    data.update_counts, np.ascontiguousarray(sweep, dtype=np.int64),
                    reg_w, reg_h, 0.0, 0.0, False, step,
                )
        elapsed = clock.pause()
        J = objective(W, H, data, params)
        bold_driver_step(driver, J)
        rmse = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
        if done > log.records[-1].total_updates:
            log.append(elapsed, done, J, rmse)
        if rmse_target is not None and rmse <= rmse_target:
            break
        if control.stop_flag.is_set():
            break
    if collect_audit:
        run_dsgd.last_audit = (audit, user_part, item_part)
    return W, H, log


run_dsgd.last_audit = None


def als_half_sweep(W, H, data: ShardedRatings, params: HyperParams, side: str) -> None:
    """Solve every row of one factor exactly, holding the other fixed.

    side='w' updates user rows from the row-compressed view; side='h'
    updates item rows from the column-compressed view.  Raises
    SingularSystemError naming the offending row or column.
    """
    if side == "w":
        status = kernels._als_sweep(
            W.data, H.data, data.row_ptr, data.row_items, data.row_vals,
            params.lam, params.weighted,
        )
        if status >= 0:
            raise SingularSystemError(
                f"singular system for user row {status} (no ratings and lambda=0, "
                "or indefinite Gram matrix)", index=status, axis="user",
            )
    elif side == "h":
        status = kernels._als_sweep(
            H.data, W.data, data.col_ptr, data.col_users, data.col_vals,
            params.lam, params.weighted,
        )
        if status >= 0:
            raise SingularSystemError(
                f"singular system for item column {status} (no ratings and lambda=0, "
                "or indefinite Gram matrix)", index=status, axis="item",
            )
    else:
        raise ValueError("side must be 'w' or 'h'")


def run_als(
    data: ShardedRatings,
    params: HyperParams,
    epochs: int,
    seed: int = 0,
    test=None,
):
    """Alternating exact row solves: all of W (ascending rows), then all
    of H, once per epoch.  The objective never increases across a half
    sweep."""
    kernels.warm_up()
    W, H = init_factors(data.m, data.n, params.k, seed)
    log = ConvergenceLog(metadata=_log_metadata("als", params, seed, epochs=epochs))
    rmse0 = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
    log.append(0.0, 0, objective(W, H, data, params), rmse0)
    solves = 0
    clock = _EpochClock()
    for _ in range(epochs):
        clock.start()
        als_half_sweep(W, H, data, params, "w")
        als_half_sweep(W, H, data, params, "h")
        solves += data.m + data.n
        elapsed = clock.pause()
        rmse = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
        log.append(elapsed, solves, objective(W, H, data, params), rmse)
    return W, H, log


def run_ccdpp(
    data: ShardedRatings,
    params: HyperParams,
    epochs: int,
    seed: int = 0,
    test=None,
    inner_iters: int = 1,
):
    """Rank-wise coordinate descent with residual maintenance, one full
    rank sweep per epoch."""
    kernels.warm_up()
    W, H = init_factors(data.m, data.n, params.k, seed)
    residual = kernels.ResidualMatrix.from_factors(W, H, data)
    log = ConvergenceLog(
        metadata=_log_metadata("ccdpp", params, seed, epochs=epochs, inner_iters=inner_iters)
    )
    rmse0 = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
    log.append(0.0, 0, objective(W, H, data, params), rmse0)
    coord_updates = 0
    clock = _EpochClock()
    for _ in range(epochs):
        clock.start()
        kernels.ccdpp_epoch(W, H, data, residual, params, inner_iters=inner_iters)
        coord_updates += (data.m + data.n) * params.k * inner_iters
        elapsed = clock.pause()
        rmse = test_rmse(W, H, test) if test is not None and len(test) else float("nan")
        log.append(elapsed, coord_updates, objective(W, H, data, params), rmse)
    return W, H, log
