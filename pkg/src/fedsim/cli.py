"""Command-line entry points: run experiments, sweep grids, inspect
partitions, compute flatness diagnostics, and verify the hand-derived
golden trace of the FedSMOO update rules.

Exit codes: 0 success, 1 configuration error, 2 divergence, 3 golden-trace
mismatch.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .algorithms import (
    ClientState,
    HyperParams,
    ServerState,
    baseline_local_round,
    Broadcast,
    fedsmoo_local_round,
    fedsmoo_server_round,
)
from .diagnostics import fixed_subset, flatness_report, generalization_bound
from .engine import (
    ConfigError,
    ExperimentConfig,
    load_model_vector,
    run_experiment,
)
from .numerics import Batch, ParamVector, QuadraticFed
from .partition import dirichlet_partition, partition_stats, pathological_partition
from .sam_core import corrected_perturbation, dual_mu_update, PerturbState
from . import engine as _engine

__all__ = ["main", "console_main", "trace_golden"]

_GOLDEN_TOL = 1e-12


class _TraceMismatch(Exception):
    pass


def _check(name, got, want, tol=_GOLDEN_TOL):
    got = np.atleast_1d(np.asarray(got, dtype=np.float64))
    want = np.atleast_1d(np.asarray(want, dtype=np.float64))
    if got.shape != want.shape or np.max(np.abs(got - want)) > tol:
        raise _TraceMismatch(f"{name}: got {got}, want {want}")


def trace_golden(eta=0.1, beta=1.0, r=0.1, quiet=False) -> int:
    """Replay the 1-D hand-traced FedSMOO round and verify every intermediate.

    Two quadratic clients (centers 1 and 3) start from w=0 with all duals
    zero; a single local step must produce the known values for the
    gradient, perturbation, dual, perturbed gradient, local model and local
    dual, and aggregation must produce the known server dual and model. The
    r=0 variant is additionally checked against the dynamic-regularizer
    (FedDyn) trace. Returns 0 on success, 3 on the first mismatch.
    """

    def say(text):
        if not quiet:
            print(text)

    hyper = HyperParams(eta=eta, beta=beta, r=r, K=1, m=2, n=2)
    w0 = ParamVector(np.zeros(1))
    s0 = ParamVector(np.zeros(1))
    model_a = QuadraticFed(np.array([1.0]))
    model_b = QuadraticFed(np.array([3.0]))
    batch = Batch(np.zeros((1, 1)), np.zeros(1, dtype=np.int64))

    try:
        # Step-by-step re-derivation for client A through the perturbation ops.
        state = PerturbState(mu=ParamVector(np.zeros(1)), s_global=s0, radius=r)
        g = ParamVector(model_a._grad(w0.values, None, None))
        _check("gradient g", g.values, [-1.0])
        s_hat = corrected_perturbation(g, state)
        _check("perturbation s_hat", s_hat.values, [-0.1])
        state = dual_mu_update(state, s_hat)
        _check("dual mu", state.mu.values, [-0.1])
        g_hat = ParamVector(model_a._grad(w0.values + s_hat.values, None, None))
        _check("perturbed gradient g_hat", g_hat.values, [-1.1])
        w_step = w0.values - eta * (g_hat.values - 0.0 + (w0.values - w0.values) / beta)
        _check("local model w_i", w_step, [0.11])
        _check("summary tilde_s", state.mu.values - s_hat.values, [0.0])
        _check("local dual lambda_i", -(w_step - w0.values) / beta, [-0.11])

        # The packaged local rounds must reproduce the same numbers.
        def one_batch():
            while True:
                yield batch

        ca = ClientState.fresh(0, 1, r=r)
        cb = ClientState.fresh(1, 1, r=r)
        ret_a, ca = fedsmoo_local_round(ca, model_a, w0, s0, hyper, one_batch(), eta)
        ret_b, cb = fedsmoo_local_round(cb, model_b, w0, s0, hyper, one_batch(), eta)
        _check("round w_i (client A)", ret_a.w_i.values, [0.11])
        _check("round w_i (client B)", ret_b.w_i.values, [0.31])
        _check("round tilde_s (client A)", ret_a.tilde_s.values, [0.0])
        _check("round lambda_i (client A)", ca.lambda_i.values, [-0.11])

        server = ServerState.fresh(w0)
        server = fedsmoo_server_round(server, [ret_a, ret_b], hyper, m=2)
        _check("server lambda", server.lambda_g.values, [-0.21])
        _check("server w", server.w.values, [0.42])
        w_bar = 0.5 * (ret_a.w_i.values + ret_b.w_i.values)
        _check("aggregation identity", server.w.values + beta * server.lambda_g.values, w_bar)

        # r=0 collapses the SAM step: the trajectory must equal FedDyn's.
        hyper0 = HyperParams(eta=eta, beta=beta, r=0.0, K=1, m=2, n=2)
        sm = ClientState.fresh(0, 1, r=0.0)
        dy = ClientState.fresh(0, 1, r=0.0)
        ret_sm, _ = fedsmoo_local_round(sm, model_a, w0, s0, hyper0, one_batch(), eta)
        ret_dy, _ = baseline_local_round(
            "feddyn", dy, model_a, Broadcast(w=w0), hyper0, one_batch(), eta
        )
        _check("r=0 reduction to FedDyn", ret_sm.w_i.values, ret_dy.w_i.values, tol=0.0)
    except _TraceMismatch as exc:
        say(f"golden trace MISMATCH — {exc}")
        return 3

    say("golden trace: all quantities match to 1e-12")
    return 0


def _load_config(args):
    overrides = args.set or []
    return ExperimentConfig.from_file(args.config, overrides)


def _guard_overwrite(path, force):
    if os.path.exists(path) and not force:
        raise ConfigError(f"refusing to overwrite {path} (pass --force)")


def _build_partition_inputs(cfg):
    if cfg.task == "quadratic":
        raise ConfigError("partition-stats needs a classification task")
    train, _ = _engine._build_dataset(cfg)
    if cfg.partition == "dirichlet":
        plan = dirichlet_partition(
            train.labels, train.num_classes, cfg.m, cfg.dirichlet_u,
            cfg.with_replacement, seed=[cfg.master_seed, 102],
        )
    else:
        plan = pathological_partition(
            train.labels, train.num_classes, cfg.m, cfg.pathological_c,
            cfg.with_replacement, seed=[cfg.master_seed, 102],
        )
    return train, plan


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out or cfg.out_dir or "out"
    _guard_overwrite(os.path.join(out_dir, "metrics.csv"), args.force)
    summary, _, _ = run_experiment(cfg, out_dir=out_dir)
    print(summary.to_json())
    return 0 if summary.status == "ok" else 2


def _parse_grid(grid_args):
    axes = []
    for spec in grid_args:
        if "=" not in spec:
            raise ConfigError(f"grid spec {spec!r} is not KEY=v1,v2,...")
        key, _, values = spec.partition("=")
        key = key.strip()
        options = [v.strip() for v in values.split(",") if v.strip()]
        if not options:
            raise ConfigError(f"grid spec {spec!r} has no values")
        axes.append((key, options))
    return axes


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    axes = _parse_grid(args.grid or [])
    out_dir = args.out or cfg.out_dir or "sweep-out"
    table_path = os.path.join(out_dir, "sweep.csv")
    _guard_overwrite(table_path, args.force)
    os.makedirs(out_dir, exist_ok=True)

    keys = [k for k, _ in axes]
    combos = list(itertools.product(*[v for _, v in axes])) if axes else [()]

    def run_cell(item):
        index, combo = item
        overrides = dict(zip(keys, combo))
        cell_dir = os.path.join(out_dir, f"cell_{index:03d}")
        label = ";".join(f"{k}={v}" for k, v in overrides.items())
        try:
            cell_cfg = cfg.replace(**overrides)
            summary, _, _ = run_experiment(cell_cfg, out_dir=cell_dir)
            return (index, label, summary.status, summary.final_test_acc,
                    summary.min_grad_norm_sq)
        except Exception as exc:  # noqa: BLE001 - cell failures must not kill the sweep
            return (index, label, f"failed: {exc}", None, None)

    workers = args.workers or int(os.environ.get("FEDSIM_WORKERS", "1"))
    items = list(enumerate(combos))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, items))
    else:
        results = [run_cell(item) for item in items]

    with open(table_path, "w") as fh:
        fh.write("cell,overrides,status,final_test_acc,min_grad_norm_sq\n")
        for index, label, status, acc, ming in sorted(results):
            fh.write(f"{index},{label},{status},{acc},{ming}\n")
    print(f"wrote {table_path} ({len(results)} cells)")
    return 0


def _cmd_partition_stats(args) -> int:
    cfg = _load_config(args)
    train, plan = _build_partition_inputs(cfg)
    stats = partition_stats(plan, train.labels, train.num_classes)
    payload = {
        "class_counts": stats.class_counts.tolist(),
        "class_std": stats.class_std,
        "per_client_totals": stats.client_class_counts.sum(axis=1).tolist(),
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        _guard_overwrite(args.out, args.force)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    params = load_model_vector(args.model)
    world = _engine.init_world(cfg)
    if world.train is None:
        data = Batch(np.zeros((1, 1)), np.zeros(1, dtype=np.int64))
    else:
        data = fixed_subset(world.train.features, world.train.labels)
    report = flatness_report(world.shared_model, params, data)
    payload = {
        "top_eigenvalue": report.top_eigenvalue,
        "trace_estimate": report.trace_estimate,
        "trace_stderr": report.trace_stderr,
        "power_iterations_used": report.power_iterations_used,
        "probes_used": report.probes_used,
    }
    if params.layer_shapes:
        data_size = world.train.size if world.train is not None else 2
        input_norm = (
            float(np.linalg.norm(world.train.features, axis=1).mean())
            if world.train is not None
            else 1.0
        )
        bound = generalization_bound(params, input_norm, data_size, p=0.05, epsilon=1.0)
        payload["v_l"] = bound.v_l
        payload["bound_term"] = bound.bound_term
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        _guard_overwrite(args.out, args.force)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-optimization simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="config file path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", default=None, help="output directory/file")
        p.add_argument("--force", action="store_true", help="allow overwriting outputs")
        p.add_argument("--workers", type=int, default=None,
                       help="parallel workers (default: FEDSIM_WORKERS or 1)")

    add_common(sub.add_parser("run", help="run one experiment"))
    sweep = sub.add_parser("sweep", help="run a grid of experiments")
    add_common(sweep)
    sweep.add_argument("--grid", action="append", metavar="KEY=v1,v2",
                       help="sweep axis (repeatable; Cartesian product)")
    add_common(sub.add_parser("partition-stats", help="summarize a partition"))
    diag = sub.add_parser("diagnose", help="flatness diagnostics for a saved model")
    add_common(diag)
    diag.add_argument("--model", required=True, help="model .fspv file")
    sub.add_parser("trace-golden", help="verify the hand-derived update trace")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "partition-stats":
            return _cmd_partition_stats(args)
        if args.command == "diagnose":
            return _cmd_diagnose(args)
        if args.command == "trace-golden":
            return trace_golden()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"missing file: {exc.filename}", file=sys.stderr)
        return 1
    return 0


def console_main():
    raise SystemExit(main())
