"""Command-line surface: dataset generation and conversion, training with
any solver, multi-process peers, and benchmark sweeps.

Every flag has a config-file equivalent (`key = value` lines, `#`
comments); flags override file values, and the effective configuration
is echoed into the convergence-log metadata.  The environment variable
``NOMAD_LOG_DIR`` supplies a default output directory for logs and
models when explicit paths are not given.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, data as data_mod, evaluate, hybrid, nomad
from .core import HyperParams, partition_rows
from .data import DataFormatError, Entries, SyntheticSpec
from .evaluate import throughput as log_throughput
from .kernels import SingularSystemError
from .nomad import EngineError, NomadEngine, RunControl
from .transport import SocketMesh, TransportError

SOLVERS = ("nomad", "serial_sgd", "dsgd", "ccdpp", "als")

PRESETS = {
    # published per-dataset hyperparameters (degree-weighted regularization)
    "netflix": dict(k=100, lam=0.05, alpha=0.012, beta=0.05, reg_mode="weighted"),
    "yahoo": dict(k=100, lam=1.0, alpha=0.00075, beta=0.01, reg_mode="weighted"),
    "hugewiki": dict(k=100, lam=0.01, alpha=0.001, beta=0.0, reg_mode="weighted"),
    # desk-scale synthetic benchmark (plain regularization; see README)
    "synthetic": dict(k=10, lam=0.01, alpha=0.04, beta=0.03, reg_mode="plain"),
}

SYNTHETIC_DATA = dict(
    n_users=2000, n_items=500, k_true=10, noise_sd=0.1, nnz=120000, exponent=3.0
)


class CliError(Exception):
    """User-facing configuration or runtime error; exits nonzero."""


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Overlay precedence: flag > config file > preset > hard default."""
    merged = vars(args).copy()
    file_values = read_config_file(args.config) if args.config else {}
    for key, raw in file_values.items():
        if key not in merged:
            raise CliError(f"unknown config key {key!r}")
        if merged[key] is None:
            merged[key] = raw
    preset = merged.get("preset")
    if preset:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for key, val in PRESETS[preset].items():
            if merged.get(key) is None:
                merged[key] = val
    return merged


def _coerce(merged: dict, key: str, cast, default=None):
    val = merged.get(key)
    if val is None:
        return default
    if isinstance(val, str):
        if cast is bool:
            return val.lower() in ("1", "true", "yes", "on")
        return cast(val)
    return val


def _out_dir() -> Path | None:
    env = os.environ.get("NOMAD_LOG_DIR")
    return Path(env) if env else None


def _default_output(name: str) -> Path | None:
    base = _out_dir()
    if base is None:
        return None
    base.mkdir(parents=True, exist_ok=True)
    return base / name


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------


def cmd_generate(args, parser) -> int:
    merged = _merge_config(args, parser)
    out = Path(_coerce(merged, "out", str, "."))
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(
        n_users=_coerce(merged, "users", int),
        n_items=_coerce(merged, "items", int),
        k_true=_coerce(merged, "rank", int),
        noise_sd=_coerce(merged, "noise", float, 0.1),
        nnz=_coerce(merged, "nnz", int),
        exponent=_coerce(merged, "exponent", float, 3.0),
        user_degree_file=_coerce(merged, "user_degrees", str),
        item_degree_file=_coerce(merged, "item_degrees", str),
        seed=_coerce(merged, "seed", int, 0),
    )
    entries, W_true, H_true = data_mod.generate_synthetic(spec)
    meta = data_mod.write_binary(out / "data.bin", entries, name="synthetic")
    np.save(out / "w_true.npy", W_true.data)
    np.save(out / "h_true.npy", H_true.data)
    with open(out / "meta.json", "w") as fh:
        json.dump(
            {
                "m": meta.m,
                "n": meta.n,
                "nnz": meta.nnz,
                "k_true": spec.k_true,
                "noise_sd": spec.noise_sd,
                "exponent": spec.exponent,
                "seed": spec.seed,
            },
            fh,
            indent=2,
        )
    print(f"wrote {meta.nnz} ratings ({meta.m} x {meta.n}) to {out}")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _load_entries(path: str, index_base: int) -> Entries:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == data_mod.MAGIC:
        _, entries = data_mod.read_binary(path)
        return entries
    _, entries = data_mod.parse_text(path, index_base=index_base)
    return entries


def _resolve_dataset(merged) -> tuple[Entries, Entries | None]:
    """Exactly one data source: --data (+ optional split) or --train/--test."""
    data_path = _coerce(merged, "data", str)
    train_path = _coerce(merged, "train", str)
    test_path = _coerce(merged, "test", str)
    index_base = _coerce(merged, "index_base", int, 0)
    if data_path and train_path:
        raise CliError("give either --data or --train/--test, not both")
    if data_path:
        entries = _load_entries(data_path, index_base)
        frac = _coerce(merged, "test_fraction", float, 0.0)
        if frac > 0:
            return data_mod.split_train_test(
                entries, frac, _coerce(merged, "split_seed", int, 0)
            )
        return entries, None
    if train_path:
        train = _load_entries(train_path, index_base)
        test = _load_entries(test_path, index_base) if test_path else None
        return train, test
    raise CliError("no dataset: give --data or --train (or config equivalents)")


def _hyper_params(merged) -> HyperParams:
    k = _coerce(merged, "k", int)
    if k is None:
        raise CliError("latent dimension --k required (or use --preset)")
    return HyperParams(
        k=k,
        lam=_coerce(merged, "lam", float, 0.05),
        alpha=_coerce(merged, "alpha", float, 0.012),
        beta=_coerce(merged, "beta", float, 0.05),
        reg_mode=_coerce(merged, "reg_mode", str, "weighted"),
    )


def _run_control(merged, need_budget=True) -> RunControl:
    epochs = _coerce(merged, "epochs", float)
    seconds = _coerce(merged, "seconds", float)
    updates = _coerce(merged, "updates", int)
    rmse_target = _coerce(merged, "rmse_target", float)
    if need_budget and all(x is None for x in (epochs, seconds, updates, rmse_target)):
        raise CliError("empty budget: set --epochs, --seconds, --updates, or --rmse-target")
    return RunControl(
        seconds=seconds,
        epochs=epochs,
        updates=updates,
        rmse_target=rmse_target,
        checkpoint_seconds=_coerce(merged, "checkpoint_seconds", float),
        checkpoint_updates=_coerce(merged, "checkpoint_updates", int),
        balancing=_coerce(merged, "balancing", str, "uniform"),
        trace=_coerce(merged, "trace_path", str) is not None,
        batch_capacity=_coerce(merged, "batch_capacity", int, 100),
        max_delay=_coerce(merged, "max_delay", float, 0.010),
        float32=_coerce(merged, "float32", bool, False),
    )


def _echo_config(log, merged) -> None:
    for key, val in sorted(merged.items()):
        if key in ("config", "func") or val is None:
            continue
        log.metadata.setdefault(f"config.{key}", str(val))


def _train_once(merged, train: Entries, test: Entries | None):
    solver = _coerce(merged, "solver", str)
    if solver not in SOLVERS:
        raise CliError(f"unknown solver {solver!r}; choose from {SOLVERS}")
    params = _hyper_params(merged)
    seed = _coerce(merged, "seed", int, 0)
    threads = _coerce(merged, "threads", int, 1)
    epochs = _coerce(merged, "epochs", float)
    if solver != "nomad" and _coerce(merged, "trace_path", str):
        raise CliError("--trace records the asynchronous engine's audit log; "
                       "only --solver nomad supports it")

    if solver == "nomad":
        control = _run_control(merged)
        part = partition_rows(train.m, threads)
        sharded = data_mod.shard(train, part)
        engine = NomadEngine(
            sharded, params, p=threads, control=control, seed=seed, test=test
        )
        W, H, log = engine.run()
        trace_path = _coerce(merged, "trace_path", str)
        if trace_path:
            nomad.write_trace(trace_path, engine.traces, sharded)
        workers = threads
    elif solver == "serial_sgd":
        control = _run_control(merged)
        sharded = data_mod.shard(train, partition_rows(train.m, 1))
        W, H, log = baselines.run_serial_sgd(
            sharded, params, control, seed=seed, test=test,
            order=_coerce(merged, "order", str, "permutation"),
        )
        workers = 1
    elif solver == "dsgd":
        control = _run_control(merged)
        sharded = data_mod.shard(train, partition_rows(train.m, 1))
        W, H, log = baselines.run_dsgd(
            sharded, params, p=threads, control=control, seed=seed, test=test
        )
        workers = threads
    else:
        if epochs is None:
            raise CliError(f"--epochs required for {solver}")
        sharded = data_mod.shard(train, partition_rows(train.m, 1))
        if solver == "ccdpp":
            W, H, log = baselines.run_ccdpp(
                sharded, params, epochs=int(epochs), seed=seed, test=test,
                inner_iters=_coerce(merged, "inner_iters", int, 1),
            )
        else:
            W, H, log = baselines.run_als(
                sharded, params, epochs=int(epochs), seed=seed, test=test
            )
        workers = 1
    return W, H, log, workers


def cmd_train(args, parser) -> int:
    merged = _merge_config(args, parser)
    train, test = _resolve_dataset(merged)
    W, H, log, workers = _train_once(merged, train, test)
    _echo_config(log, merged)

    log_path = _coerce(merged, "log", str) or _default_output(
        f"{merged.get('solver')}_{int(time.time())}.csv"
    )
    if log_path:
        evaluate.write_csv(log, log_path)
    model_path = _coerce(merged, "model", str)
    if model_path:
        data_mod.save_model(model_path, W, H)

    final = log.final
    print(f"final train objective: {final.train_objective:.6g}")
    if not np.isnan(final.test_rmse):
        print(f"final test RMSE: {final.test_rmse:.6g}")
    if len(log.records) >= 2:
        print(f"throughput: {log_throughput(log, workers):.6g} updates/worker/sec")
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def cmd_bench(args, parser) -> int:
    merged = _merge_config(args, parser)
    train, test = _resolve_dataset(merged)
    solvers = [s.strip() for s in _coerce(merged, "solvers", str, "nomad").split(",")]
    thread_counts = [
        int(t) for t in str(_coerce(merged, "threads", str, "1")).split(",")
    ]
    out = Path(_coerce(merged, "out", str) or _out_dir() or ".")
    out.mkdir(parents=True, exist_ok=True)
    target = _coerce(merged, "rmse_target_summary", float)

    rows = []
    for solver in solvers:
        for threads in thread_counts:
            cell = dict(merged)
            cell["solver"] = solver
            cell["threads"] = threads
            label = f"{solver}_t{threads}"
            try:
                W, H, log, workers = _train_once(cell, train, test)
                _echo_config(log, cell)
                evaluate.write_csv(log, out / f"{label}.csv")
                final = log.final
                tput = (
                    log_throughput(log, workers) if len(log.records) >= 2 else float("nan")
                )
                reach = (
                    evaluate.time_to_rmse(log, target) if target is not None else None
                )
                rows.append(
                    (solver, threads, "ok", final.test_rmse, tput,
                     "" if reach is None else repr(reach), final.total_updates)
                )
                print(f"{label}: rmse={final.test_rmse:.4f} throughput={tput:.0f}")
            except Exception as exc:  # record the failure, keep sweeping
                rows.append((solver, threads, f"error: {exc}", "", "", "", ""))
                print(f"{label}: FAILED ({exc})", file=sys.stderr)
    with open(out / "summary.csv", "w") as fh:
        fh.write("solver,threads,status,final_rmse,updates_per_worker_per_sec,time_to_target,total_updates\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
    if _coerce(merged, "gnuplot", bool, False):
        _write_gnuplot(out, [f"{s}_t{t}" for s in solvers for t in thread_counts])
    print(f"summary written to {out / 'summary.csv'}")
    return 0


def _write_gnuplot(out: Path, labels) -> None:
    lines = [
        "set datafile separator ','",
        "set xlabel 'seconds'",
        "set ylabel 'test RMSE'",
        "set key top right",
        "plot \\",
    ]
    plots = [
        f"  '{label}.csv' using 1:4 with lines title '{label}'" for label in labels
    ]
    lines.append(", \\\n".join(plots))
    (out / "plot.gp").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# serve-peer
# --------------------------------------------------------------------------


def _parse_hosts(hosts: str) -> list[tuple[str, int]]:
    endpoints = []
    for part in hosts.split(","):
        host, _, port = part.strip().rpartition(":")
        if not host or not port.isdigit():
            raise CliError(f"bad endpoint {part!r}; expected host:port")
        endpoints.append((host, int(port)))
    return endpoints


def cmd_serve_peer(args, parser) -> int:
    merged = _merge_config(args, parser)
    rank = _coerce(merged, "rank", int)
    endpoints = _parse_hosts(_coerce(merged, "hosts", str, ""))
    if rank is None or not endpoints:
        raise CliError("serve-peer needs --rank and --hosts")
    tpm = _coerce(merged, "threads", int, 1)
    machines = len(endpoints)
    params = _hyper_params(merged)
    control = _run_control(merged)
    seed = _coerce(merged, "seed", int, 0)

    train, test = _resolve_dataset(merged)
    part = partition_rows(train.m, machines * tpm)
    sharded = data_mod.shard(train, part)

    mesh = SocketMesh(rank, endpoints, k=params.k)
    mesh.connect(timeout=_coerce(merged, "connect_timeout", float, 30.0))
    result = hybrid.run_hybrid(
        sharded, params, machines, tpm, mesh, control=control, seed=seed,
        test=test if rank == 0 else None,
    )
    if rank != 0:
        return 0
    W, H, log = result
    _echo_config(log, merged)
    log_path = _coerce(merged, "log", str) or _default_output("hybrid.csv")
    if log_path:
        evaluate.write_csv(log, log_path)
    model_path = _coerce(merged, "model", str)
    if model_path:
        data_mod.save_model(model_path, W, H)
    final = log.final
    print(f"final train objective: {final.train_objective:.6g}")
    if not np.isnan(final.test_rmse):
        print(f"final test RMSE: {final.test_rmse:.6g}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_common_data_flags(sp):
    sp.add_argument("--data", help="single dataset file (binary or text)")
    sp.add_argument("--train", help="training dataset file")
    sp.add_argument("--test", help="held-out dataset file")
    sp.add_argument("--test-fraction", dest="test_fraction", type=float)
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.add_argument("--index-base", dest="index_base", type=int, choices=(0, 1))


def _add_model_flags(sp):
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--k", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--reg-mode", dest="reg_mode", choices=("weighted", "plain"))
    sp.add_argument("--seed", type=int)


def _add_budget_flags(sp):
    sp.add_argument("--epochs", type=float)
    sp.add_argument("--seconds", type=float)
    sp.add_argument("--updates", type=int)
    sp.add_argument("--rmse-target", dest="rmse_target", type=float)
    sp.add_argument("--checkpoint-seconds", dest="checkpoint_seconds", type=float)
    sp.add_argument("--checkpoint-updates", dest="checkpoint_updates", type=int)
    sp.add_argument("--balancing", choices=("uniform", "two_choice"))
    sp.add_argument("--batch-capacity", dest="batch_capacity", type=int)
    sp.add_argument("--max-delay", dest="max_delay", type=float)
    sp.add_argument("--float32", action="store_const", const="1", default=None,
                    help="keep factor blocks in single precision (nomad solver)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nomadmf",
        description="Asynchronous nomadic-column matrix completion and baselines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic dataset")
    gen.add_argument("--users", type=int, required=True)
    gen.add_argument("--items", type=int, required=True)
    gen.add_argument("--rank", type=int, required=True)
    gen.add_argument("--noise", type=float)
    gen.add_argument("--nnz", type=int)
    gen.add_argument("--exponent", type=float)
    gen.add_argument("--user-degrees", dest="user_degrees")
    gen.add_argument("--item-degrees", dest="item_degrees")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", required=True)
    gen.add_argument("--config")
    gen.set_defaults(func=cmd_generate, preset=None)

    tr = sub.add_parser("train", help="train one solver")
    tr.add_argument("--solver", choices=SOLVERS)
    tr.add_argument("--threads", type=int)
    tr.add_argument("--order", choices=baselines.SERIAL_ORDERS)
    tr.add_argument("--inner-iters", dest="inner_iters", type=int)
    tr.add_argument("--log")
    tr.add_argument("--model")
    tr.add_argument("--trace", dest="trace_path")
    tr.add_argument("--config")
    _add_common_data_flags(tr)
    _add_model_flags(tr)
    _add_budget_flags(tr)
    tr.set_defaults(func=cmd_train)

    be = sub.add_parser("bench", help="sweep solvers x thread counts")
    be.add_argument("--solvers")
    be.add_argument("--threads")
    be.add_argument("--out")
    be.add_argument("--rmse-target-summary", dest="rmse_target_summary", type=float)
    be.add_argument("--gnuplot", action="store_const", const="1", default=None)
    be.add_argument("--order", choices=baselines.SERIAL_ORDERS)
    be.add_argument("--inner-iters", dest="inner_iters", type=int)
    be.add_argument("--config")
    _add_common_data_flags(be)
    _add_model_flags(be)
    _add_budget_flags(be)
    be.set_defaults(func=cmd_bench)

    pe = sub.add_parser("serve-peer", help="join a multi-process mesh run")
    pe.add_argument("--rank", type=int)
    pe.add_argument("--hosts", help="comma-separated host:port list, one per rank")
    pe.add_argument("--threads", type=int, help="compute threads per machine")
    pe.add_argument("--connect-timeout", dest="connect_timeout", type=float)
    pe.add_argument("--log")
    pe.add_argument("--model")
    pe.add_argument("--config")
    _add_common_data_flags(pe)
    _add_model_flags(pe)
    _add_budget_flags(pe)
    pe.set_defaults(func=cmd_serve_peer)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except (CliError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SingularSystemError, EngineError, TransportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
