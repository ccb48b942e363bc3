import socket
import subprocess
import sys

import numpy as np
import pytest

import nomadmf as nm
from nomadmf.evaluate import read_csv
from nomadmf.hybrid import run_hybrid
from nomadmf.nomad import RunControl


def free_ports(count):
    socks, ports = [], []
    for _ in range(count):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        ports.append(s.getsockname()[1])
        socks.append(s)
    for s in socks:
        s.close()
    return ports


def peer_cmd(rank, hosts, data_path, extra, k=3):
    return [
        sys.executable, "-m", "nomadmf.cli", "serve-peer",
        "--rank", str(rank), "--hosts", hosts,
        "--data", str(data_path), "--test-fraction", "0.15", "--split-seed", "1",
        "--k", str(k), "--lambda", "0.01", "--alpha", "0.05", "--beta", "0.02",
        "--reg-mode", "plain", "--connect-timeout", "20",
    ] + extra


@pytest.fixture(scope="module")
def small_binary(tmp_path_factory):
    spec = nm.SyntheticSpec(n_users=160, n_items=40, k_true=3, noise_sd=0.1,
                            nnz=4000, seed=17)
    entries, _, _ = nm.generate_synthetic(spec)
    path = tmp_path_factory.mktemp("hybrid") / "small.bin"
    nm.write_binary(path, entries)
    return path


class TestSingleMachineDelegation:
    def test_single_worker_bitwise(self):
        # one machine, one thread: the delegation is exactly run_nomad,
        # which is deterministic, so logs and factors match bitwise
        spec = nm.SyntheticSpec(n_users=80, n_items=20, k_true=2, noise_sd=0.1,
                                nnz=1200, seed=3)
        entries, _, _ = nm.generate_synthetic(spec)
        params = nm.HyperParams(k=2, lam=0.01, alpha=0.05, beta=0.02, reg_mode="plain")
        data1 = nm.shard(entries, nm.partition_rows(80, 1))
        Wf, Hf, log_flat = nm.run_nomad(data1, params, p=1,
                                        control=RunControl(epochs=3), seed=9)
        data2 = nm.shard(entries, nm.partition_rows(80, 1))
        Wh, Hh, log_hyb = run_hybrid(data2, params, machines=1, threads_per_machine=1,
                                     transport=None, control=RunControl(epochs=3), seed=9)
        assert np.array_equal(Wf.data, Wh.data)
        assert np.array_equal(Hf.data, Hh.data)
        flat_fields = [(r.total_updates, r.train_objective) for r in log_flat.records]
        hyb_fields = [(r.total_updates, r.train_objective) for r in log_hyb.records]
        assert flat_fields == hyb_fields

    def test_multi_thread_same_engine_behavior(self):
        # one machine, several threads: same flat engine code path; the
        # run is concurrent so compare outcomes, not bits
        spec = nm.SyntheticSpec(n_users=80, n_items=20, k_true=2, noise_sd=0.1,
                                nnz=1200, seed=3)
        entries, _, _ = nm.generate_synthetic(spec)
        params = nm.HyperParams(k=2, lam=0.01, alpha=0.05, beta=0.02, reg_mode="plain")
        train, test = nm.split_train_test(entries, 0.15, seed=1)
        data1 = nm.shard(train, nm.partition_rows(80, 2))
        _, _, log_flat = nm.run_nomad(data1, params, p=2,
                                      control=RunControl(epochs=25), seed=9, test=test)
        data2 = nm.shard(train, nm.partition_rows(80, 2))
        _, _, log_hyb = run_hybrid(data2, params, machines=1, threads_per_machine=2,
                                   transport=None, control=RunControl(epochs=25),
                                   seed=9, test=test)
        assert log_hyb.metadata["solver"] == "nomad"  # delegated engine
        assert abs(log_flat.final.test_rmse - log_hyb.final.test_rmse) < 0.05


class TestCirculationTrace:
    def test_per_visit_permutations_and_cross_machine_versions(self):
        """Drive a 2-machine mesh inside one process (one engine per
        thread) so both machines' traces stay inspectable, then audit:
        every parcel's visit sequence within a machine receipt is a
        permutation of the local workers, and per-column versions are
        gap-free across machines."""
        import threading

        from nomadmf.hybrid import HybridEngine
        from nomadmf.transport import SocketMesh

        spec = nm.SyntheticSpec(n_users=120, n_items=30, k_true=2, noise_sd=0.1,
                                nnz=2200, seed=23)
        entries, _, _ = nm.generate_synthetic(spec)
        params = nm.HyperParams(k=2, lam=0.01, alpha=0.05, beta=0.02, reg_mode="plain")
        machines, tpm = 2, 2
        ports = free_ports(2)
        endpoints = [("127.0.0.1", p) for p in ports]

        meshes = {}
        mesh_errors = []

        def connect(rank):
            try:
                mesh = SocketMesh(rank, endpoints, k=2)
                mesh.connect(timeout=15)
                meshes[rank] = mesh
            except Exception as exc:  # pragma: no cover
                mesh_errors.append(exc)

        ts = [threading.Thread(target=connect, args=(r,)) for r in range(2)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        assert not mesh_errors

        engines = {}
        results = {}
        run_errors = []

        def drive(rank):
            try:
                data = nm.shard(entries, nm.partition_rows(entries.m, machines * tpm))
                control = RunControl(epochs=4, trace=True, checkpoint_seconds=0.1)
                engine = HybridEngine(data, params, mesh=meshes[rank],
                                      threads_per_machine=tpm, control=control,
                                      seed=31)
                engines[rank] = engine
                results[rank] = engine.run()
            except Exception as exc:  # pragma: no cover
                run_errors.append(exc)

        ts = [threading.Thread(target=drive, args=(r,)) for r in range(2)]
        for t in ts:
            t.start()
        for t in ts:
            t.join(timeout=120)
        assert not run_errors, run_errors
        assert results[0] is not None and results[1] is None

        # merge proc events from all machines: (item, version, worker)
        events = []
        for rank, engine in engines.items():
            for rec in engine.traces:
                items, vers, _ = rec.procs()
                for j, v in zip(items, vers):
                    events.append((int(j), int(v), rec.worker))
        assert events
        events.sort()
        by_item = {}
        for j, v, w in events:
            by_item.setdefault(j, []).append((v, w))
        for j, seq in by_item.items():
            versions = [v for v, _ in seq]
            assert versions == list(range(1, len(seq) + 1)), f"version gap on column {j}"
            # split the visit sequence into same-machine runs; every
            # completed run must be a permutation of that machine's workers
            workers = [w for _, w in seq]
            run = [workers[0]]
            for w in workers[1:]:
                if w // tpm == run[-1] // tpm and len(run) < tpm:
                    run.append(w)
                else:
                    if len(run) == tpm:
                        assert len(set(run)) == tpm, f"repeat visit in column {j}: {run}"
                    run = [w]


class TestTwoProcessRun:
    def test_completes_and_logs(self, small_binary, tmp_path):
        ports = free_ports(2)
        hosts = f"127.0.0.1:{ports[0]},127.0.0.1:{ports[1]}"
        log_path = tmp_path / "hy.csv"
        model_path = tmp_path / "hy.model"
        peer = subprocess.Popen(
            peer_cmd(1, hosts, small_binary, ["--threads", "2", "--epochs", "4", "--seed", "3"]),
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        )
        rank0 = subprocess.run(
            peer_cmd(0, hosts, small_binary,
                     ["--threads", "2", "--epochs", "4", "--seed", "3",
                      "--log", str(log_path), "--model", str(model_path)]),
            capture_output=True, text=True, timeout=120,
        )
        peer_out, peer_err = peer.communicate(timeout=60)
        assert rank0.returncode == 0, rank0.stderr
        assert peer.returncode == 0, peer_err.decode()
        assert "final test RMSE" in rank0.stdout
        log = read_csv(log_path)
        assert log.metadata["solver"] == "nomad_hybrid"
        assert log.metadata["machines"] == "2"
        updates = [r.total_updates for r in log.records]
        assert updates[0] == 0 and updates[-1] >= 4 * 0.85 * 4000 * 0.999
        assert all(b > a for a, b in zip(updates, updates[1:]))
        W, H = nm.data.load_model(model_path)
        assert W.rows == 160 and H.rows == 40 and W.k == 3

    def test_peer_disconnect_aborts_run(self, small_binary):
        import time

        ports = free_ports(2)
        hosts = f"127.0.0.1:{ports[0]},127.0.0.1:{ports[1]}"
        # long time budget so the run would not finish on its own
        extra = ["--threads", "2", "--seconds", "30", "--seed", "3"]
        peer = subprocess.Popen(
            peer_cmd(1, hosts, small_binary, extra),
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        )
        rank0 = subprocess.Popen(
            peer_cmd(0, hosts, small_binary, extra),
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        time.sleep(3.0)  # let the mesh build and the run start
        peer.kill()
        peer.wait(timeout=10)
        out, err = rank0.communicate(timeout=60)
        assert rank0.returncode != 0
        assert "error" in err.lower()

    def test_wrong_k_handshake_rejected(self, small_binary):
        ports = free_ports(2)
        hosts = f"127.0.0.1:{ports[0]},127.0.0.1:{ports[1]}"
        extra = ["--threads", "1", "--epochs", "1", "--seed", "0"]
        peer = subprocess.Popen(
            peer_cmd(1, hosts, small_binary, extra, k=5),
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        )
        rank0 = subprocess.run(
            peer_cmd(0, hosts, small_binary, extra, k=3),
            capture_output=True, text=True, timeout=60,
        )
        peer_out, peer_err = peer.communicate(timeout=30)
        assert rank0.returncode != 0
        assert peer.returncode != 0
        combined = rank0.stderr + peer_err.decode()
        assert "k" in combined and ("handshake" in combined or "rejected" in combined)
