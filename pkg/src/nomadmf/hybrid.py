"""Hybrid runs: multiple processes (machines), each with several compute
workers plus one dedicated sender and one dedicated receiver thread.

A parcel arriving at a machine visits every local compute worker exactly
once, in a freshly sampled random permutation, before becoming eligible
for a network send.  Recipient selection happens at machine granularity
with the same uniform / two-choice rules as the flat engine; outgoing
parcels are batched per destination under the flush policy.

Checkpoints are coordinated by rank 0: every machine parks its workers
at a parcel boundary, flushes its outbox, and sends a marker on every
channel; once a machine has received markers from all peers, nothing is
in flight toward it, so its queues hold a complete local snapshot, which
it ships to rank 0.  Rank 0 assembles the global state, verifies parcel
conservation, logs metrics, and broadcasts resume or stop.
"""
from __future__ import annotations

import queue as queue_mod
import threading
import time
from collections import deque

import numpy as np

from . import kernels
from .core import FactorMatrix, HyperParams, ShardedRatings, objective
from .evaluate import ConvergenceLog, test_rmse
from .nomad import (
    EngineError,
    NomadEngine,
    RunControl,
    TraceRecorder,
    init_factors,
)
from .transport import (
    CTRL_CKPT_BEGIN,
    CTRL_CKPT_MARKER,
    CTRL_RESUME,
    CTRL_SNAP_PARCELS,
    CTRL_SNAP_STATS,
    CTRL_SNAP_WROWS,
    MSG_CONTROL,
    MSG_PARCELS,
    MSG_STOP,
    ColumnParcel,
    ParcelBatch,
    SocketMesh,
    TransportError,
    decode_payload,
    encode_batch,
    flush_policy,
)

_IDLE_SLEEP = 5e-5
_SEND_POLL = 2e-4
_DEFAULT_CKPT_SECONDS = 0.25


class _PeerLost(Exception):
    pass


class HybridEngine:
    """Per-process engine for a machines x threads run.

    Every participating process constructs one of these with the same
    dataset, parameters, and seed; rank 0 returns the assembled factors
    and the convergence log, other ranks return None from ``run``.
    """

    def __init__(
        self,
        data: ShardedRatings,
        params: HyperParams,
        mesh: SocketMesh,
        threads_per_machine: int,
        control: RunControl | None = None,
        seed: int = 0,
        test=None,
    ):
        self.machines = mesh.size
        self.tpm = threads_per_machine
        p_global = self.machines * self.tpm
        if data.p != p_global:
            raise EngineError(
                f"data sharded for {data.p} workers; hybrid needs machines*threads={p_global}"
            )
        if mesh.k != params.k:
            raise EngineError(f"mesh negotiated k={mesh.k}, params have k={params.k}")
        kernels.warm_up()
        self.data = data
        self.params = params
        self.mesh = mesh
        self.rank = mesh.rank
        self.control = control if control is not None else RunControl(epochs=1.0)
        self.seed = seed
        self.test = test

        W, H = init_factors(data.m, data.n, params.k, seed)
        self.W = W.data
        self.H = H.data
        self.versions = [0] * data.n
        self.route_order: list[np.ndarray | None] = [None] * data.n
        self.route_pos = [0] * data.n
        data.reset_update_counts()
        self._reg_w, self._reg_h = kernels.sgd_reg_weights(data, params)

        self.queues = [deque() for _ in range(self.tpm)]
        self.outbox: deque[tuple[int, int]] = deque()
        self._ctrl_outbox: deque[tuple[int, bytes]] = deque()
        self.machine_estimates = [0] * self.machines
        self._worker_updates = [0] * self.tpm
        self._worker_pops = [0] * self.tpm
        self.traces = (
            [TraceRecorder(self.rank * self.tpm + c) for c in range(self.tpm)]
            if self.control.trace
            else None
        )

        # initial placement: uniform over global workers, same stream as
        # the flat engine; parcels start at the assigned worker and then
        # circulate through the rest of that machine
        placement_rng = np.random.default_rng((seed, 2))
        owners = placement_rng.integers(0, p_global, size=data.n)
        init_rng = np.random.default_rng((seed, 48 + self.rank))
        for j in range(data.n):
            w = int(owners[j])
            if w // self.tpm != self.rank:
                continue
            first = w % self.tpm
            rest = [c for c in range(self.tpm) if c != first]
            init_rng.shuffle(rest)
            self.route_order[j] = np.array([first] + rest, dtype=np.int64)
            self.route_pos[j] = 1
            self.queues[first].append(j)

        self.worker_rngs = [
            np.random.default_rng((seed, 16 + self.rank * self.tpm + c))
            for c in range(self.tpm)
        ]
        self.recv_rng = np.random.default_rng((seed, 64 + self.rank))

        self._budget = self.control.budget_updates(data.nnz)
        self._pause_req = threading.Event()
        self._stop = threading.Event()
        self._barrier_enter = threading.Barrier(self.tpm + 1)
        self._barrier_exit = threading.Barrier(self.tpm + 1)
        self._flush_req = threading.Event()
        self._flush_done = threading.Event()
        self._markers_from = [0] * self.machines
        self._marker_cond = threading.Condition()
        self._ctrl_q: queue_mod.Queue = queue_mod.Queue()
        self._errors: list[BaseException] = []
        self._threads: list[threading.Thread] = []
        self._elapsed = 0.0
        self._segment_start: float | None = None
        self._round = 0
        self.log = ConvergenceLog(
            metadata={
                "solver": "nomad_hybrid",
                "machines": str(self.machines),
                "threads_per_machine": str(self.tpm),
                "seed": str(seed),
                "k": str(params.k),
                "lambda": repr(params.lam),
                "alpha": repr(params.alpha),
                "beta": repr(params.beta),
                "balancing": self.control.balancing,
            }
        )

    # -- machine-level load accounting --------------------------------------

    def _local_load(self) -> int:
        return sum(len(q) for q in self.queues) + len(self.outbox)

    def _select_machine(self, rng: np.random.Generator) -> int:
        if self.machines == 1:
            return 0
        if self.control.balancing == "uniform":
            return int(rng.integers(self.machines))
        a = int(rng.integers(self.machines))
        b = int(rng.integers(self.machines - 1))
        if b >= a:
            b += 1
        la = self._local_load() if a == self.rank else self.machine_estimates[a]
        lb = self._local_load() if b == self.rank else self.machine_estimates[b]
        if la < lb:
            return a
        if lb < la:
            return b
        return min(a, b)

    # -- worker threads ------------------------------------------------------

    def _start_circulation(self, j: int, rng: np.random.Generator) -> None:
        perm = rng.permutation(self.tpm)
        self.route_order[j] = perm
        self.route_pos[j] = 1
        self.queues[int(perm[0])].append(j)

    def _worker_loop(self, c: int) -> None:
        data = self.data
        w_global = self.rank * self.tpm + c
        my_queue = self.queues[c]
        users, vals, counts = data.users, data.values, data.update_counts
        item_ptr = data.item_ptr[w_global]
        base = int(data.shard_ptr[w_global])
        reg_w, reg_h = self._reg_w, self._reg_h
        alpha, beta = self.params.alpha, self.params.beta
        delay = (self.control.worker_delays or {}).get(w_global, 0.0)
        rng = self.worker_rngs[c]
        rec = self.traces[c] if self.traces is not None else None
        dummy_i = np.empty(0, dtype=np.int64)
        dummy_t = np.empty(0, dtype=np.uint32)
        dummy_s = np.empty(0, dtype=np.float64)
        sgd_column = kernels._sgd_column
        try:
            while True:
                if self._pause_req.is_set():
                    self._barrier_enter.wait(self.control.barrier_timeout)
                    self._barrier_exit.wait(self.control.barrier_timeout)
                    if self._stop.is_set():
                        return
                    continue
                if self._stop.is_set():
                    return
                try:
                    j = my_queue.popleft()
                except IndexError:
                    time.sleep(_IDLE_SLEEP)
                    continue
                lo = base + item_ptr[j]
                hi = base + item_ptr[j + 1]
                if rec is not None:
                    rec.ensure_updates(hi - lo)
                    rec.upd_pos = sgd_column(
                        self.W, self.H, j, users, vals, counts, lo, hi,
                        reg_w, reg_h, alpha, beta,
                        True, rec.upd_entry, rec.upd_t, rec.upd_s, rec.upd_pos,
                    )
                else:
                    sgd_column(
                        self.W, self.H, j, users, vals, counts, lo, hi,
                        reg_w, reg_h, alpha, beta,
                        False, dummy_i, dummy_t, dummy_s, 0,
                    )
                self.versions[j] += 1
                self._worker_updates[c] += hi - lo
                self._worker_pops[c] += 1
                if rec is not None:
                    rec.add_proc(j, self.versions[j], hi - lo)
                if delay:
                    time.sleep(delay)
                pos = self.route_pos[j]
                if pos < self.tpm:
                    nxt = int(self.route_order[j][pos])
                    self.route_pos[j] = pos + 1
                    self.queues[nxt].append(j)
                else:
                    dest = self._select_machine(rng)
                    if dest == self.rank:
                        self._start_circulation(j, rng)
                    else:
                        self.outbox.append((dest, j))
        except threading.BrokenBarrierError:
            return
        except BaseException as exc:
            self._errors.append(exc)
            self._barrier_enter.abort()
            self._barrier_exit.abort()

    # -- sender thread -------------------------------------------------------

    def _sender_loop(self) -> None:
        pending: dict[int, list[int]] = {r: [] for r in range(self.machines) if r != self.rank}
        first_ts: dict[int, float] = {}
        k = self.params.k
        try:
            while True:
                # control frames first: sockets are written only by this
                # thread, so coordination traffic cannot interleave with a
                # parcel batch mid-frame
                while True:
                    try:
                        dest, frame = self._ctrl_outbox.popleft()
                    except IndexError:
                        break
                    self.mesh.send(dest, frame)
                if (
                    self._stop.is_set()
                    and not self.outbox
                    and not self._ctrl_outbox
                    and not any(pending.values())
                ):
                    return
                while True:
                    try:
                        dest, j = self.outbox.popleft()
                    except IndexError:
                        break
                    if not pending[dest]:
                        first_ts[dest] = time.perf_counter()
                    pending[dest].append(j)
                flush_all = self._flush_req.is_set()
                now = time.perf_counter()
                for dest, items in pending.items():
                    if not items:
                        continue
                    if flush_all or flush_policy(
                        len(items),
                        now - first_ts[dest],
                        self.control.batch_capacity,
                        self.control.max_delay,
                    ):
                        parcels = [
                            ColumnParcel(item=j, h=self.H[j].copy(), version=self.versions[j])
                            for j in items
                        ]
                        batch = ParcelBatch(
                            sender_queue_len=min(self._local_load(), 0xFFFFFFFF),
                            parcels=parcels,
                            msg_type=MSG_PARCELS,
                        )
                        self.mesh.send(dest, encode_batch(batch, k))
                        items.clear()
                if flush_all:
                    marker = ParcelBatch(
                        sender_queue_len=CTRL_CKPT_MARKER, parcels=[], msg_type=MSG_CONTROL
                    )
                    frame = encode_batch(marker, k)
                    for r in range(self.machines):
                        if r != self.rank:
                            self.mesh.send(r, frame)
                    self._flush_req.clear()
                    self._flush_done.set()
                time.sleep(_SEND_POLL)
        except BaseException as exc:
            self._errors.append(exc)
            self._flush_done.set()

    def _send_control(self, dest: int, subcode: int, parcels=None, msg_type: int = MSG_CONTROL) -> None:
        batch = ParcelBatch(
            sender_queue_len=subcode, parcels=parcels or [], msg_type=msg_type
        )
        self._ctrl_outbox.append((dest, encode_batch(batch, self.params.k)))

    def _broadcast_control(self, subcode: int, msg_type: int = MSG_CONTROL) -> None:
        for r in range(self.machines):
            if r != self.rank:
                self._send_control(r, subcode, msg_type=msg_type)

    # -- receiver thread -----------------------------------------------------

    def _receiver_loop(self) -> None:
        import selectors

        sel = selectors.DefaultSelector()
        buffers: dict[int, bytearray] = {}
        for r, sock in self.mesh.peers.items():
            sock.setblocking(False)
            sel.register(sock, selectors.EVENT_READ, r)
            buffers[r] = bytearray()
        k = self.params.k
        try:
            while not self._stop.is_set():
                events = sel.select(timeout=0.05)
                for key, _ in events:
                    r = key.data
                    try:
                        chunk = key.fileobj.recv(1 << 16)
                    except BlockingIOError:
                        continue
                    except OSError:
                        chunk = b""
                    if not chunk:
                        if not self._stop.is_set():
                            raise _PeerLost(f"machine {r} disconnected")
                        sel.unregister(key.fileobj)
                        continue
                    buf = buffers[r]
                    buf.extend(chunk)
                    while len(buf) >= 4:
                        length = int.from_bytes(buf[:4], "little")
                        if len(buf) < 4 + length:
                            break
                        payload = bytes(buf[4 : 4 + length])
                        del buf[: 4 + length]
                        self._dispatch(r, decode_payload(payload, k))
        except _PeerLost as exc:
            self._errors.append(TransportError(str(exc)))
            self._ctrl_q.put(("peer_lost",))
        except BaseException as exc:
            self._errors.append(exc)
            self._ctrl_q.put(("receiver_error",))
        finally:
            sel.close()

    def _dispatch(self, src: int, batch: ParcelBatch) -> None:
        if batch.msg_type == MSG_PARCELS:
            self.machine_estimates[src] = batch.sender_queue_len
            for parcel in batch.parcels:
                j = parcel.item
                self.H[j] = parcel.h
                self.versions[j] = parcel.version
                self._start_circulation(j, self.recv_rng)
            return
        if batch.msg_type == MSG_STOP:
            self._ctrl_q.put(("stop",))
            return
        sub = batch.sender_queue_len
        if sub == CTRL_CKPT_MARKER:
            with self._marker_cond:
                self._markers_from[src] += 1
                self._marker_cond.notify_all()
        elif sub == CTRL_CKPT_BEGIN:
            self._ctrl_q.put(("begin",))
        elif sub == CTRL_RESUME:
            self._ctrl_q.put(("resume",))
        elif sub in (CTRL_SNAP_PARCELS, CTRL_SNAP_WROWS, CTRL_SNAP_STATS):
            self._ctrl_q.put(("snap", src, sub, batch))
        else:
            self._errors.append(EngineError(f"unknown control subcode {sub}"))
            self._ctrl_q.put(("receiver_error",))

    # -- checkpoint machinery --------------------------------------------------

    def _park_workers(self) -> None:
        self._pause_req.set()
        try:
            self._barrier_enter.wait(self.control.barrier_timeout)
        except threading.BrokenBarrierError as exc:
            self._raise_worker_error(exc)

    def _release_workers(self, stop: bool) -> None:
        if stop:
            self._stop.set()
        self._pause_req.clear()
        try:
            self._barrier_exit.wait(self.control.barrier_timeout)
        except threading.BrokenBarrierError as exc:
            self._raise_worker_error(exc)

    def _raise_worker_error(self, exc) -> None:
        if self._errors:
            raise EngineError("hybrid worker failed") from self._errors[0]
        raise EngineError("checkpoint barrier broken or timed out") from exc

    def _flush_and_mark(self) -> None:
        self._flush_done.clear()
        self._flush_req.set()
        if not self._flush_done.wait(self.control.barrier_timeout):
            raise EngineError("sender failed to flush for checkpoint")

    def _await_markers(self) -> None:
        self._round += 1
        target = self._round
        deadline = time.monotonic() + self.control.barrier_timeout
        with self._marker_cond:
            while any(
                self._markers_from[r] < target
                for r in range(self.machines)
                if r != self.rank
            ):
                if self._errors:
                    raise EngineError("peer failure during checkpoint") from self._errors[0]
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise EngineError("timed out waiting for checkpoint markers")
                self._marker_cond.wait(timeout=min(0.05, remaining))

    def _held_parcels(self) -> list[int]:
        held: list[int] = []
        for q in self.queues:
            held.extend(q)
        held.extend(j for _, j in self.outbox)  # non-empty only before a flush
        return held

    def _quiesce(self) -> tuple[list[int], int]:
        """Park, flush, and wait for markers; returns held parcels and updates."""
        self._park_workers()
        self._flush_and_mark()
        self._await_markers()
        return self._held_parcels(), sum(self._worker_updates)

    # -- rank-0 coordination -----------------------------------------------------

    def _ctrl_get(self, want: str, timeout: float):
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise EngineError(f"timed out waiting for {want}")
            try:
                msg = self._ctrl_q.get(timeout=min(0.1, remaining))
            except queue_mod.Empty:
                continue
            if msg[0] in ("peer_lost", "receiver_error"):
                raise EngineError("transport failure during run") from (
                    self._errors[0] if self._errors else None
                )
            return msg

    def _coordinate_checkpoint(self, stop_hint: bool) -> bool:
        """Rank-0 path: returns True when the run should stop."""
        self._broadcast_control(CTRL_CKPT_BEGIN)
        held, my_updates = self._quiesce()
        # run clock pauses once local compute is parked and drained
        self._elapsed += time.perf_counter() - self._segment_start
        self._segment_start = None

        n = self.data.n
        H_snap = np.zeros_like(self.H)
        versions_snap = np.zeros(n, dtype=np.int64)
        seen = np.zeros(n, dtype=np.int64)
        W_snap = self.W.copy()
        for j in held:
            H_snap[j] = self.H[j]
            versions_snap[j] = self.versions[j]
            seen[j] += 1
        total_updates = my_updates
        pending = {r: {CTRL_SNAP_PARCELS, CTRL_SNAP_WROWS, CTRL_SNAP_STATS} for r in range(1, self.machines)}
        while any(pending.values()):
            msg = self._ctrl_get("snapshots", self.control.barrier_timeout)
            if msg[0] != "snap":
                continue
            _, src, sub, batch = msg
            pending[src].discard(sub)
            if sub == CTRL_SNAP_PARCELS:
                for parcel in batch.parcels:
                    H_snap[parcel.item] = parcel.h
                    versions_snap[parcel.item] = parcel.version
                    seen[parcel.item] += 1
            elif sub == CTRL_SNAP_WROWS:
                for parcel in batch.parcels:
                    W_snap[parcel.item] = parcel.h
            else:
                total_updates += int(batch.parcels[0].version)
        if not np.all(seen == 1):
            missing = int(np.count_nonzero(seen == 0))
            dupes = int(np.count_nonzero(seen > 1))
            raise EngineError(
                f"parcel conservation violated: {missing} missing, {dupes} duplicated"
            )
        self._own_at_ckpt = my_updates
        self._global_at_ckpt = total_updates

        obj = objective(W_snap, H_snap, self.data, self.params)
        rmse = (
            test_rmse(W_snap, H_snap, self.test)
            if self.test is not None and len(self.test)
            else float("nan")
        )
        if not self.log.records or total_updates > self.log.records[-1].total_updates:
            self.log.append(self._elapsed, total_updates, obj, rmse)
        self._last_state = (W_snap, H_snap, versions_snap, total_updates)

        stop = stop_hint
        if self._budget is not None and total_updates >= self._budget:
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
            self._broadcast_control(0, msg_type=MSG_STOP)
        else:
            self._broadcast_control(CTRL_RESUME)
        self._release_workers(stop)
        self._segment_start = time.perf_counter()
        return stop

    def _peer_checkpoint(self) -> bool:
        """Non-zero rank path after receiving BEGIN; True when stopping."""
        held, my_updates = self._quiesce()
        k = self.params.k
        parcels = [
            ColumnParcel(item=j, h=self.H[j].copy(), version=self.versions[j]) for j in held
        ]
        self._send_control(0, CTRL_SNAP_PARCELS, parcels=parcels)
        lo, hi = self._my_block()
        wrows = [
            ColumnParcel(item=i, h=self.W[i].copy(), version=0) for i in range(lo, hi)
        ]
        self._send_control(0, CTRL_SNAP_WROWS, parcels=wrows)
        stats = [
            ColumnParcel(item=self.rank, h=np.zeros(k), version=my_updates)
        ]
        self._send_control(0, CTRL_SNAP_STATS, parcels=stats)
        msg = self._ctrl_get("resume or stop", self.control.barrier_timeout)
        stop = msg[0] == "stop"
        self._release_workers(stop)
        return stop

    def _my_block(self) -> tuple[int, int]:
        bounds = self.data.partition.block_bounds()
        lo = bounds[self.rank * self.tpm][0]
        hi = bounds[self.rank * self.tpm + self.tpm - 1][1]
        return lo, hi

    # -- lifecycle -----------------------------------------------------------

    def _start_threads(self) -> None:
        self._segment_start = time.perf_counter()
        for c in range(self.tpm):
            t = threading.Thread(
                target=self._worker_loop, args=(c,), daemon=True, name=f"hy{self.rank}-w{c}"
            )
            self._threads.append(t)
            t.start()
        for target, name in ((self._sender_loop, "sender"), (self._receiver_loop, "receiver")):
            t = threading.Thread(target=target, daemon=True, name=f"hy{self.rank}-{name}")
            self._threads.append(t)
            t.start()

    def run(self):
        """Participate in the run; rank 0 returns (W, H, log), rest None."""
        self._last_state = None
        if self.rank == 0:
            obj = objective(self.W, self.H, self.data, self.params)
            rmse = (
                test_rmse(self.W, self.H, self.test)
                if self.test is not None and len(self.test)
                else float("nan")
            )
            self.log.append(0.0, 0, obj, rmse)
        self._start_threads()
        try:
            if self.rank == 0:
                return self._run_rank0()
            self._run_peer()
            return None
        finally:
            self._stop.set()
            self._barrier_enter.abort()
            self._barrier_exit.abort()
            self._flush_done.set()
            for t in self._threads:
                t.join(timeout=self.control.barrier_timeout)
            self.mesh.close()

    def _run_rank0(self):
        cadence = self.control.checkpoint_seconds or _DEFAULT_CKPT_SECONDS
        next_mark = cadence
        self._own_at_ckpt = 0
        self._global_at_ckpt = 0
        try:
            while True:
                time.sleep(1e-3)
                if self._errors:
                    raise EngineError("background thread failed") from self._errors[0]
                elapsed = self._elapsed + (time.perf_counter() - self._segment_start)
                final = self.control.stop_flag.is_set()
                if self.control.seconds is not None and elapsed >= self.control.seconds:
                    final = True
                due = final or elapsed >= next_mark
                if self._budget is not None and not due:
                    # global progress is only known at checkpoints; between
                    # them, extrapolate from this machine's own counters
                    own = sum(self._worker_updates)
                    estimate = self._global_at_ckpt + (own - self._own_at_ckpt) * self.machines
                    due = estimate >= self._budget
                if not due:
                    continue
                if self._coordinate_checkpoint(stop_hint=final):
                    break
                while next_mark <= self._elapsed:
                    next_mark += cadence
        except EngineError as exc:
            # keep the partial log reachable for post-mortem
            self.log.metadata["aborted"] = "1"
            exc.partial_log = self.log
            raise
        W_snap, H_snap, _, _ = self._last_state
        return FactorMatrix(W_snap), FactorMatrix(H_snap), self.log

    def _run_peer(self) -> None:
        while True:
            msg = self._ctrl_get("control", timeout=3600.0)
            if msg[0] == "begin":
                if self._peer_checkpoint():
                    return
            elif msg[0] == "stop":
                self._park_workers()
                self._release_workers(True)
                return


def run_hybrid(
    data: ShardedRatings,
    params: HyperParams,
    machines: int,
    threads_per_machine: int,
    transport: SocketMesh | None,
    control: RunControl | None = None,
    seed: int = 0,
    test=None,
):
    """Run this process's share of a machines x threads hybrid run.

    With one machine there is no network and no circulation benefit, so
    the run delegates to the flat in-process engine with the same total
    worker count.  Otherwise ``transport`` must be a connected SocketMesh
    whose size equals ``machines``.
    """
    if machines == 1:
        engine = NomadEngine(
            data, params, p=threads_per_machine, control=control, seed=seed, test=test
        )
        return engine.run()
    if transport is None:
        raise EngineError("multi-machine runs need a connected SocketMesh")
    if transport.size != machines:
        raise EngineError(f"mesh has {transport.size} endpoints, machines={machines}")
    engine = HybridEngine(
        data,
        params,
        mesh=transport,
        threads_per_machine=threads_per_machine,
        control=control,
        seed=seed,
        test=test,
    )
    return engine.run()
