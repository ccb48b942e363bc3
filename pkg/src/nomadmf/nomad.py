"""The asynchronous nomadic-column SGD engine.

Symmetric workers each own a block of user rows and a FIFO queue of
column parcels.  A worker pops a parcel, applies the SGD pair update to
every locally stored rating of that column, picks a recipient, and
pushes the parcel on.  There are no locks: user rows are written only by
their owner, and a column is written only by the worker currently
holding its parcel.

Checkpoints drain the world to a barrier at parcel boundaries, snapshot
all state, assert parcel conservation, and resume; checkpoint time is
excluded from the logged elapsed seconds.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import FactorMatrix, HyperParams, ShardedRatings, step_size
from .evaluate import ConvergenceLog, test_rmse
from .transport import ColumnParcel, InProcessTransport

__all__ = [
    "ColumnParcel",
    "RunControl",
    "WorkerState",
    "NomadEngine",
    "EngineError",
    "TraceRecorder",
    "TraceAudit",
    "init_factors",
    "select_recipient",
    "run_nomad",
    "checkpoint",
    "audit_trace",
    "write_trace",
]

_IDLE_SLEEP = 5e-5
_POLL_SLEEP = 5e-4
_BATCH_PARCELS = 64

BALANCING_MODES = ("uniform", "two_choice")


class EngineError(RuntimeError):
    """Engine-level failure: broken barrier, worker crash, bad config."""


def init_factors(m: int, n: int, k: int, seed: int) -> tuple[FactorMatrix, FactorMatrix]:
    """Initial factors with entries i.i.d. Uniform(0, 1/sqrt(k)).

    Drawn from counter-based streams keyed by (seed, matrix id), so the
    result is identical no matter how many workers later share the
    matrices.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scale = 1.0 / np.sqrt(k)
    out = []
    for matrix_id, rows in ((0, m), (1, n)):
        key = np.array([seed & 0xFFFFFFFFFFFFFFFF, matrix_id], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        out.append(FactorMatrix(gen.random((rows, k)) * scale))
    return out[0], out[1]


@dataclass
class RunControl:
    """Stop condition, checkpoint cadence, and engine knobs for one run.

    At least one budget (seconds, epochs, updates, rmse_target) must be
    set; the run stops at the first one that fires.  ``epochs`` counts
    multiples of the training nnz in total updates.  Balancing selects
    the recipient rule.  ``worker_delays`` injects per-parcel sleeps for
    straggler experiments.
    """

    seconds: float | None = None
    epochs: float | None = None
    updates: int | None = None
    rmse_target: float | None = None
    checkpoint_seconds: float | None = None
    checkpoint_updates: int | None = None
    balancing: str = "uniform"
    trace: bool = False
    worker_delays: dict[int, float] | None = None
    barrier_timeout: float = 60.0
    batch_capacity: int = 100
    max_delay: float = 0.010
    float32: bool = False
    stop_flag: threading.Event = field(default_factory=threading.Event)

    def __post_init__(self):
        if all(x is None for x in (self.seconds, self.epochs, self.updates, self.rmse_target)):
            raise ValueError("empty budget: set seconds, epochs, updates, or rmse_target")
        if self.balancing not in BALANCING_MODES:
            raise ValueError(f"balancing must be one of {BALANCING_MODES}")

    def budget_updates(self, nnz: int) -> int | None:
        caps = []
        if self.epochs is not None:
            caps.append(int(np.ceil(self.epochs * nnz)))
        if self.updates is not None:
            caps.append(int(self.updates))
        return min(caps) if caps else None


class TraceRecorder:
    """Per-worker in-memory event buffers for invariant audits.

    Update rows hold (global entry index, counter after the update, step
    used); processing rows hold (item, version after, local rating
    count).  Rows are appended in the worker's own time order.
    """

    def __init__(self, worker: int, capacity: int = 1 << 16):
        self.worker = worker
        self.upd_entry = np.empty(capacity, dtype=np.int64)
        self.upd_t = np.empty(capacity, dtype=np.uint32)
        self.upd_s = np.empty(capacity, dtype=np.float64)
        self.upd_pos = 0
        self.proc_item = np.empty(capacity, dtype=np.int32)
        self.proc_version = np.empty(capacity, dtype=np.int64)
        self.proc_nloc = np.empty(capacity, dtype=np.int32)
        self.proc_pos = 0

    def ensure_updates(self, extra: int) -> None:
        need = self.upd_pos + extra
        if need > len(self.upd_entry):
            cap = max(need, 2 * len(self.upd_entry))
            for name in ("upd_entry", "upd_t", "upd_s"):
                old = getattr(self, name)
                grown = np.empty(cap, dtype=old.dtype)
                grown[: self.upd_pos] = old[: self.upd_pos]
                setattr(self, name, grown)

    def ensure_procs(self, extra: int) -> None:
        need = self.proc_pos + extra
        if need > len(self.proc_item):
            cap = max(need, 2 * len(self.proc_item))
            for name in ("proc_item", "proc_version", "proc_nloc"):
                old = getattr(self, name)
                grown = np.empty(cap, dtype=old.dtype)
                grown[: self.proc_pos] = old[: self.proc_pos]
                setattr(self, name, grown)

    def add_proc(self, item: int, version: int, nloc: int) -> None:
        self.ensure_procs(1)
        self.proc_item[self.proc_pos] = item
        self.proc_version[self.proc_pos] = version
        self.proc_nloc[self.proc_pos] = nloc
        self.proc_pos += 1

    def updates(self):
        return (
            self.upd_entry[: self.upd_pos],
            self.upd_t[: self.upd_pos],
            self.upd_s[: self.upd_pos],
        )

    def procs(self):
        return (
            self.proc_item[: self.proc_pos],
            self.proc_version[: self.proc_pos],
            self.proc_nloc[: self.proc_pos],
        )


@dataclass
class WorkerState:
    """One worker's context: id, queue, owned rows, shard, estimates, rng."""

    id: int
    p: int
    transport: InProcessTransport
    rng: np.random.Generator
    w_block: np.ndarray
    block_range: tuple[int, int]
    peer_queue_estimates: list[int]

    @property
    def queue(self):
        return self.transport.queues[self.id]

    def queue_estimate(self, q: int) -> int:
        if q == self.id:
            return len(self.transport.queues[q])
        return self.peer_queue_estimates[q]


def select_recipient(state: WorkerState, balancing: str = "uniform") -> int:
    """Pick the next holder of a parcel.

    ``uniform`` samples over all workers (self included).  ``two_choice``
    samples two distinct candidates and returns the one whose last-known
    queue is shorter, breaking ties toward the lower id.
    """
    p = state.p
    if balancing == "uniform":
        return int(state.rng.integers(p))
    if balancing != "two_choice":
        raise ValueError(f"unknown balancing mode {balancing!r}")
    if p == 1:
        return 0
    a = int(state.rng.integers(p))
    b = int(state.rng.integers(p - 1))
    if b >= a:
        b += 1
    la = state.queue_estimate(a)
    lb = state.queue_estimate(b)
    if la < lb:
        return a
    if lb < la:
        return b
    return min(a, b)


class NomadEngine:
    """Runs p symmetric workers over a sharded dataset until a budget fires.

    One engine instance drives exactly one run.  Use ``run`` for the
    whole lifecycle, or ``start`` / ``checkpoint`` / ``finish`` to drive
    checkpoints manually.
    """

    def __init__(
        self,
        data: ShardedRatings,
        params: HyperParams,
        p: int = 1,
        control: RunControl | None = None,
        seed: int = 0,
        test=None,
        transport: InProcessTransport | None = None,
    ):
        if data.p != p:
            raise EngineError(f"data sharded for {data.p} workers, engine wants {p}")
        if transport is not None and transport.p != p:
            raise EngineError(f"transport sized for {transport.p} endpoints, need {p}")
        self.data = data
        self.params = params
        self.p = p
        self.control = control if control is not None else RunControl(epochs=1.0)
        self.seed = seed
        self.test = test
        kernels.warm_up()

        W, H = init_factors(data.m, data.n, params.k, seed)
        # 32-bit parameter blocks are a throughput-experiment option; all
        # metrics are still evaluated in 64-bit on snapshot copies
        dtype = np.float32 if self.control.float32 else np.float64
        self.W = W.data.astype(dtype)
        self.H = H.data.astype(dtype)
        if self.control.float32:
            self._warm_float32()
        self.versions = np.zeros(data.n, dtype=np.int64)
        self._max_slice = [
            int(np.max(np.diff(data.item_ptr[q]), initial=0)) for q in range(p)
        ]
        self.transport = transport or InProcessTransport(p)
        placement_rng = np.random.default_rng((seed, 2))
        self._initial_owner = placement_rng.integers(0, p, size=data.n)
        for j in range(data.n):
            self.transport.queues[int(self._initial_owner[j])].append(j)
        data.reset_update_counts()
        self._reg_w, self._reg_h = kernels.sgd_reg_weights(data, params)

        self.states = []
        for q in range(p):
            lo, hi = data.partition.block_bounds()[q]
            self.states.append(
                WorkerState(
                    id=q,
                    p=p,
                    transport=self.transport,
                    rng=np.random.default_rng((seed, 16 + q)),
                    w_block=self.W[lo:hi],
                    block_range=(lo, hi),
                    peer_queue_estimates=self.transport.estimates[q],
                )
            )
        self.traces = (
            [TraceRecorder(q) for q in range(p)] if self.control.trace else None
        )
        self._worker_updates = [0] * p
        self._worker_pops = [0] * p
        self._budget = self.control.budget_updates(data.nnz)
        # default cadence: one checkpoint per epoch-equivalent of updates
        self._ckpt_updates = self.control.checkpoint_updates
        if self._ckpt_updates is None and self.control.checkpoint_seconds is None:
            self._ckpt_updates = max(1, data.nnz)
        self._gate = [None] * p  # per-worker update cap (p == 1 determinism)
        self._threads: list[threading.Thread] = []
        self._worker_errors: list[BaseException] = []
        self._ckpt_req = threading.Event()
        self._stop = threading.Event()
        self._barrier_enter = threading.Barrier(p + 1)
        self._barrier_exit = threading.Barrier(p + 1)
        self._started = False
        self._finished = False
        self._elapsed = 0.0
        self._segment_start: float | None = None
        self._last_snapshot = None
        self.log = ConvergenceLog(
            metadata={
                "solver": "nomad",
                "p": str(p),
                "seed": str(seed),
                "k": str(params.k),
                "lambda": repr(params.lam),
                "alpha": repr(params.alpha),
                "beta": repr(params.beta),
                "balancing": self.control.balancing,
            }
        )

    def _warm_float32(self) -> None:
        Wt = np.zeros((1, 2), dtype=np.float32)
        Ht = np.zeros((1, 2), dtype=np.float32)
        users = np.zeros(1, dtype=np.int32)
        vals = np.zeros(1)
        reg = np.zeros(1)
        counts = np.zeros(1, dtype=np.uint32)
        dummy_i = np.empty(0, np.int64)
        dummy_t = np.empty(0, np.uint32)
        dummy_s = np.empty(0)
        kernels._sgd_column(
            Wt, Ht, 0, users, vals, counts, 0, 1, reg, reg, 1.0, 0.0,
            False, dummy_i, dummy_t, dummy_s, 0,
        )
        batch = np.zeros(1, dtype=np.int64)
        versions = np.zeros(1, dtype=np.int64)
        ptr = np.array([0, 1], dtype=np.int64)
        kernels._sgd_parcels(
            batch, 1, -1, Wt, Ht, versions, users, vals, counts, ptr, 0,
            reg, reg, 1.0, 0.0, False, dummy_i, dummy_t, dummy_s, 0,
            np.empty(0, np.int32), np.empty(0, np.int64), np.empty(0, np.int32), 0,
        )

    # -- worker side -------------------------------------------------------

    def _worker_loop(self, q: int) -> None:
        data = self.data
        state = self.states[q]
        queue = self.transport.queues[q]
        queues = self.transport.queues
        estimates = self.transport.estimates
        users, vals, counts = data.users, data.values, data.update_counts
        item_ptr = data.item_ptr[q]
        base = int(data.shard_ptr[q])
        reg_w, reg_h = self._reg_w, self._reg_h
        alpha, beta = self.params.alpha, self.params.beta
        balancing = self.control.balancing
        uniform = balancing == "uniform"
        delay = (self.control.worker_delays or {}).get(q, 0.0)
        rec = self.traces[q] if self.traces is not None else None
        dummy_i = np.empty(0, dtype=np.int64)
        dummy_t = np.empty(0, dtype=np.uint32)
        dummy_s = np.empty(0, dtype=np.float64)
        dummy_item = np.empty(0, dtype=np.int32)
        dummy_ver = np.empty(0, dtype=np.int64)
        dummy_nloc = np.empty(0, dtype=np.int32)
        versions = self.versions
        wupdates = self._worker_updates
        rng = state.rng
        batch = np.empty(_BATCH_PARCELS, dtype=np.int64)
        push_lists = [[] for _ in range(self.p)]
        max_slice = self._max_slice[q]
        sgd_parcels = kernels._sgd_parcels
        try:
            while True:
                if self._ckpt_req.is_set():
                    self._barrier_enter.wait(self.control.barrier_timeout)
                    self._barrier_exit.wait(self.control.barrier_timeout)
                    if self._stop.is_set():
                        return
                    continue
                if self._stop.is_set():
                    return
                gate = self._gate[q]
                if gate is None:
                    remaining = -1
                else:
                    remaining = gate - wupdates[q]
                    if remaining <= 0:
                        time.sleep(_IDLE_SLEEP)
                        continue
                # drain a run of parcels; one kernel call processes them all
                nb = 0
                try:
                    while nb < _BATCH_PARCELS:
                        batch[nb] = queue.popleft()
                        nb += 1
                except IndexError:
                    pass
                if nb == 0:
                    time.sleep(_IDLE_SLEEP)
                    continue
                if rec is not None:
                    rec.ensure_updates(nb * max_slice)
                    rec.ensure_procs(nb)
                    done, nupd, rec.upd_pos, rec.proc_pos = sgd_parcels(
                        batch, nb, remaining, self.W, self.H, versions,
                        users, vals, counts, item_ptr, base, reg_w, reg_h,
                        alpha, beta, True,
                        rec.upd_entry, rec.upd_t, rec.upd_s, rec.upd_pos,
                        rec.proc_item, rec.proc_version, rec.proc_nloc, rec.proc_pos,
                    )
                else:
                    done, nupd, _, _ = sgd_parcels(
                        batch, nb, remaining, self.W, self.H, versions,
                        users, vals, counts, item_ptr, base, reg_w, reg_h,
                        alpha, beta, False,
                        dummy_i, dummy_t, dummy_s, 0,
                        dummy_item, dummy_ver, dummy_nloc, 0,
                    )
                wupdates[q] += nupd
                self._worker_pops[q] += done
                if done < nb:
                    # budget hit mid-batch: unprocessed parcels go back to
                    # the front of the queue in their original order
                    for i in range(nb - 1, done - 1, -1):
                        queue.appendleft(int(batch[i]))
                    if done == 0:
                        continue
                if delay:
                    time.sleep(delay * done)
                if uniform:
                    dests = rng.integers(0, self.p, size=done)
                    for i in range(done):
                        push_lists[dests[i]].append(int(batch[i]))
                    qlen = len(queue)
                    for dest in range(self.p):
                        lst = push_lists[dest]
                        if lst:
                            queues[dest].extend(lst)
                            estimates[dest][q] = qlen
                            lst.clear()
                else:
                    for i in range(done):
                        dest = select_recipient(state, balancing)
                        self.transport.send(dest, int(batch[i]), q, len(queue))
        except threading.BrokenBarrierError:
            return
        except BaseException as exc:  # surface worker crashes to the coordinator
            self._worker_errors.append(exc)
            self._barrier_enter.abort()
            self._barrier_exit.abort()
            return

    # -- coordinator side --------------------------------------------------

    def start(self) -> None:
        if self._started:
            raise EngineError("engine instances are single-use")
        self._started = True
        if self.p == 1:
            self._gate[0] = self._next_gate()
        self._record_metrics(self.W, self.H, total_updates=0, initial=True)
        self._segment_start = time.perf_counter()
        for q in range(self.p):
            t = threading.Thread(target=self._worker_loop, args=(q,), daemon=True, name=f"nomad-w{q}")
            self._threads.append(t)
            t.start()

    def _next_gate(self) -> int | None:
        """Next update count at which the single worker should pause (so
        p=1 checkpoints land at exact, reproducible update marks)."""
        marks = []
        if self._budget is not None:
            marks.append(self._budget)
        if self._ckpt_updates:
            done = self._worker_updates[0]
            marks.append((done // self._ckpt_updates + 1) * self._ckpt_updates)
        return min(marks) if marks else None

    def total_updates(self) -> int:
        return sum(self._worker_updates)

    def elapsed(self) -> float:
        if self._segment_start is None:
            return self._elapsed
        return self._elapsed + (time.perf_counter() - self._segment_start)

    def _check_worker_health(self) -> None:
        if self._worker_errors:
            raise EngineError("worker failed") from self._worker_errors[0]

    def _conservation_check(self) -> list[list[int]]:
        queue_items = [list(q) for q in self.transport.queues]
        flat = np.sort(np.concatenate([np.asarray(qi, dtype=np.int64) for qi in queue_items])
                       if any(queue_items) else np.empty(0, dtype=np.int64))
        if len(flat) != self.data.n or not np.array_equal(flat, np.arange(self.data.n)):
            raise EngineError(
                f"parcel conservation violated: {len(flat)} parcels in queues, expected {self.data.n}"
            )
        return queue_items

    def _record_metrics(self, W, H, total_updates: int, initial: bool = False) -> None:
        from .core import objective

        obj = objective(W, H, self.data, self.params)
        rmse = test_rmse(W, H, self.test) if self.test is not None and len(self.test) else float("nan")
        if initial or not self.log.records:
            self.log.append(self.elapsed(), total_updates, obj, rmse)
            return
        if total_updates > self.log.records[-1].total_updates:
            self.log.append(self.elapsed(), total_updates, obj, rmse)

    def _checkpoint(self, stop_hint: bool = False):
        """Drain to the barrier, snapshot, log, optionally stop, resume."""
        self._check_worker_health()
        self._ckpt_req.set()
        try:
            self._barrier_enter.wait(self.control.barrier_timeout)
        except threading.BrokenBarrierError as exc:
            self._check_worker_health()
            raise EngineError(
                "a worker failed to reach the checkpoint barrier within "
                f"{self.control.barrier_timeout}s"
            ) from exc
        # world is quiescent; stop the run clock
        self._elapsed += time.perf_counter() - self._segment_start
        self._segment_start = None
        try:
            queue_items = self._conservation_check()
            total = self.total_updates()
            W_snap = self.W.copy()
            H_snap = self.H.copy()
            stats = {
                "total_updates": total,
                "pops": sum(self._worker_pops),
                "queue_lengths": [len(qi) for qi in queue_items],
                "queue_items": queue_items,
                "versions": self.versions.tolist(),
                "elapsed_sec": self._elapsed,
            }
            self._last_snapshot = (W_snap, H_snap, stats)
            self._record_metrics(W_snap, H_snap, total)
            stop = stop_hint
            if self._budget is not None and total >= self._budget:
                stop = True
            if self.control.seconds is not None and self._elapsed >= self.control.seconds:
                stop = True
            if (
                self.control.rmse_target is not None
                and self.log.records
                and self.log.records[-1].test_rmse <= self.control.rmse_target
            ):
                stop = True
            if self.control.stop_flag.is_set():
                stop = True
            if stop:
                self._stop.set()
            elif self.p == 1:
                self._gate[0] = self._next_gate()
        finally:
            self._ckpt_req.clear()
            self._segment_start = time.perf_counter()
            self._barrier_exit.wait(self.control.barrier_timeout)
        return (W_snap, H_snap, stats), self._stop.is_set()

    def checkpoint(self):
        """Public checkpoint: returns (W snapshot, H snapshot, stats)."""
        if not self._started or self._finished or self._stop.is_set():
            raise EngineError("checkpoint requires a running engine")
        (W_snap, H_snap, stats), _ = self._checkpoint(stop_hint=False)
        return FactorMatrix(W_snap), FactorMatrix(H_snap), stats

    def finish(self):
        """Final checkpoint, stop and join all workers, return results."""
        if not self._started:
            raise EngineError("engine was never started")
        if not self._finished:
            if not self._stop.is_set():
                self._checkpoint(stop_hint=True)
            for t in self._threads:
                t.join()
            self._finished = True
        W_snap, H_snap, _ = self._last_snapshot
        return FactorMatrix(W_snap), FactorMatrix(H_snap), self.log

    def run(self):
        """Drive the full run: periodic checkpoints until a budget fires."""
        self.start()
        ckpt_updates = self._ckpt_updates
        next_update_mark = ckpt_updates if ckpt_updates else None
        next_time_mark = self.control.checkpoint_seconds
        try:
            while True:
                time.sleep(_POLL_SLEEP)
                self._check_worker_health()
                final = self.control.stop_flag.is_set()
                total = self.total_updates()
                if self._budget is not None and total >= self._budget:
                    final = True
                if self.control.seconds is not None and self.elapsed() >= self.control.seconds:
                    final = True
                due = final
                if next_update_mark is not None and total >= next_update_mark:
                    due = True
                if next_time_mark is not None and self.elapsed() >= next_time_mark:
                    due = True
                if not due:
                    continue
                (_, _, stats), stopped = self._checkpoint(stop_hint=final)
                if stopped:
                    break
                if next_update_mark is not None:
                    # advance from the quiesced count so the p=1 worker gate
                    # and the coordinator marks stay in lockstep
                    while next_update_mark <= stats["total_updates"]:
                        next_update_mark += ckpt_updates
                if next_time_mark is not None:
                    while next_time_mark <= self.elapsed():
                        next_time_mark += self.control.checkpoint_seconds
        finally:
            self._stop.set()
            self._barrier_enter.abort()
            self._barrier_exit.abort()
            for t in self._threads:
                t.join()
            self._finished = True
        W_snap, H_snap, _ = self._last_snapshot
        return FactorMatrix(W_snap), FactorMatrix(H_snap), self.log


def run_nomad(
    data: ShardedRatings,
    params: HyperParams,
    p: int = 1,
    transport: InProcessTransport | None = None,
    control: RunControl | None = None,
    seed: int = 0,
    test=None,
):
    """Run the asynchronous engine to completion; returns (W, H, log)."""
    engine = NomadEngine(
        data, params, p=p, control=control, seed=seed, test=test, transport=transport
    )
    W, H, log = engine.run()
    if engine.traces is not None:
        log.metadata["traced"] = "1"
    return W, H, log


def checkpoint(engine: NomadEngine):
    """Consistent snapshot of a running engine: (W, H, stats)."""
    return engine.checkpoint()


# --------------------------------------------------------------------------
# trace audits
# --------------------------------------------------------------------------


@dataclass
class TraceAudit:
    ownership_violations: int
    version_gaps: int
    step_mismatches: int
    count_gaps: int
    events: int
    updates: int

    @property
    def ok(self) -> bool:
        return (
            self.ownership_violations == 0
            and self.version_gaps == 0
            and self.step_mismatches == 0
            and self.count_gaps == 0
        )


def _consecutive_group_check(keys: np.ndarray, vals: np.ndarray) -> int:
    """Count groups (by key) whose values are not exactly 1..group_size."""
    if len(keys) == 0:
        return 0
    order = np.lexsort((vals, keys))
    k_sorted = keys[order]
    v_sorted = vals[order].astype(np.int64)
    new_group = np.ones(len(k_sorted), dtype=bool)
    new_group[1:] = k_sorted[1:] != k_sorted[:-1]
    group_start = np.maximum.accumulate(
        np.where(new_group, np.arange(len(k_sorted)), 0)
    )
    expected = np.arange(len(k_sorted)) - group_start + 1
    bad = v_sorted != expected
    if not bad.any():
        return 0
    return len(np.unique(k_sorted[bad]))


def audit_trace(traces: list[TraceRecorder], data: ShardedRatings, params: HyperParams) -> TraceAudit:
    """Replay the trace and verify the concurrency invariants.

    Checks: every update was applied by the owner of the touched user
    row; per-column versions are gap-free consecutive integers; per-pair
    update counters are gap-free; recorded step sizes equal the schedule
    exactly.
    """
    ownership = 0
    upd_entries = []
    upd_ts = []
    upd_ss = []
    proc_items = []
    proc_vers = []
    n_events = 0
    for rec in traces:
        entries, ts, ss = rec.updates()
        users = data.users[entries]
        ownership += int(np.count_nonzero(data.partition.assignment[users] != rec.worker))
        upd_entries.append(entries)
        upd_ts.append(ts)
        upd_ss.append(ss)
        items, vers, _ = rec.procs()
        proc_items.append(items)
        proc_vers.append(vers)
        n_events += len(items)

    entries = np.concatenate(upd_entries) if upd_entries else np.empty(0, dtype=np.int64)
    ts = np.concatenate(upd_ts) if upd_ts else np.empty(0, dtype=np.uint32)
    ss = np.concatenate(upd_ss) if upd_ss else np.empty(0, dtype=np.float64)
    items = np.concatenate(proc_items) if proc_items else np.empty(0, dtype=np.int32)
    vers = np.concatenate(proc_vers) if proc_vers else np.empty(0, dtype=np.int64)

    version_gaps = _consecutive_group_check(items.astype(np.int64), vers)
    count_gaps = _consecutive_group_check(entries, ts.astype(np.int64))

    if len(ts):
        t_before = ts.astype(np.float64) - 1.0
        expected = params.alpha / (1.0 + params.beta * t_before**1.5)
        mismatch = np.flatnonzero(expected != ss)
        # vectorized pow can differ from scalar pow in the last ulp on
        # some platforms; re-check candidates against the scalar schedule
        step_mismatches = sum(
            1
            for e in mismatch
            if step_size(params, int(ts[e]) - 1) != ss[e]
        )
    else:
        step_mismatches = 0

    return TraceAudit(
        ownership_violations=ownership,
        version_gaps=version_gaps,
        step_mismatches=step_mismatches,
        count_gaps=count_gaps,
        events=n_events,
        updates=int(len(entries)),
    )


def write_trace(path, traces: list[TraceRecorder], data: ShardedRatings) -> None:
    """Write the newline-delimited audit log:
    ``event,worker,item,version,user,update_count`` per record."""
    with open(path, "w") as fh:
        fh.write("event,worker,item,version,user,update_count\n")
        for rec in traces:
            entries, ts, _ = rec.updates()
            items, vers, nlocs = rec.procs()
            cursor = 0
            for e_idx in range(len(items)):
                j = items[e_idx]
                v = vers[e_idx]
                fh.write(f"process,{rec.worker},{j},{v},-1,{nlocs[e_idx]}\n")
                for u_idx in range(cursor, cursor + nlocs[e_idx]):
                    entry = entries[u_idx]
                    fh.write(
                        f"update,{rec.worker},{j},{v},{data.users[entry]},{ts[u_idx]}\n"
                    )
                cursor += nlocs[e_idx]
