"""Command-line front end: file-driven, seeded, reproducible experiments.

Exit codes: 0 success, 1 domain failure (non-convergence, instability,
failed policy), 2 usage or file errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import approximator, coordinator, dataset as ds, dynamics, netmodel
from .errors import TacoordError

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _read_json(path, what):
    if not os.path.exists(path):
        raise UsageError(f"{what} file not found: {path}")
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _resolve_case(value):
    if os.path.exists(value):
        return netmodel.SystemCase.from_dict(_read_json(value, "case"))
    try:
        return netmodel.load_builtin_case(value)
    except FileNotFoundError:
        raise UsageError(f"case file not found: {value}") from None


def _resolve_grid(value):
    if os.path.exists(value):
        return ds.ScenarioGrid.from_dict(_read_json(value, "grid"))
    try:
        return ds.load_builtin_grid(value)
    except FileNotFoundError:
        raise UsageError(f"grid file not found: {value}") from None


def _load_config(args):
    config = {}
    if getattr(args, "config", None):
        config = _read_json(args.config, "config")
    # flags win over the config file
    for key in ("case", "grid", "dataset", "weights", "out", "seed", "jobs",
                "fixed_combo", "policies", "delays", "condition", "disturbance"):
        val = getattr(args, key, None)
        if val is not None:
            config[key] = val
    config.setdefault("seed", 0)
    config.setdefault("out", "out")
    config.setdefault("jobs", 1)
    return config


def _config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _timing(config):
    return ds.Timing.from_dict(config.get("timing", {}))


def _mlp_config(config, n_inputs):
    d = dict(config.get("mlp", {}))
    d.setdefault("layer_sizes", [n_inputs, 64, 64, 1])
    d.setdefault("seed", config.get("seed", 0))
    return approximator.MlpConfig.from_dict(d)


def _ensure_out(config):
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join("" if v is None else
                             (repr(float(v)) if isinstance(v, float) else str(v))
                             for v in row) + "\n")


def cmd_powerflow(args):
    config = _load_config(args)
    case = _resolve_case(config["case"])
    pf = netmodel.solve_power_flow(case)
    print(f"converged in {pf.iterations} iterations, "
          f"max mismatch {pf.max_mismatch:.3e} pu")
    print(f"{'bus':>5} {'type':>6} {'|V| pu':>9} {'angle deg':>10}")
    for b, v in zip(case.buses, pf.v):
        print(f"{b.id:>5} {b.type:>6} {abs(v):>9.5f} {np.degrees(np.angle(v)):>10.4f}")
    flows = netmodel.line_flows(case, pf)
    print("feature-line active power (pu):")
    for fid, p in zip(case.feature_lines, flows):
        print(f"  {fid}: {p:.6f}")
    return EXIT_OK


def cmd_collect(args):
    config = _load_config(args)
    case = _resolve_case(config["case"])
    grid = _resolve_grid(config["grid"])
    timing = _timing(config)
    out = _ensure_out(config)
    data = ds.collect(case, grid, timing, seed=config["seed"],
                      jobs=int(config["jobs"]))
    if not data.samples:
        print("error: every scenario failed", file=sys.stderr)
        return EXIT_DOMAIN
    path = os.path.join(out, "dataset.jsonl")
    data.save(path)
    n_warn = len(data.header["skipped_conditions"]) + len(data.header["skipped_disturbances"])
    manifest = {
        "config_hash": _config_hash(config),
        "seed": config["seed"],
        "case_hash": case.content_hash(),
        "samples": len(data.samples),
        "non_converged": int(len(data.samples) - len(data.converged_indices())),
        "skipped_conditions": data.header["skipped_conditions"],
        "skipped_disturbances": data.header["skipped_disturbances"],
        "dataset": path,
    }
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(data.samples)} samples to {path} ({n_warn} warnings)")
    return EXIT_OK


def cmd_train(args):
    config = _load_config(args)
    if "dataset" not in config:
        raise UsageError("train needs --dataset")
    if not os.path.exists(config["dataset"]):
        raise UsageError(f"dataset file not found: {config['dataset']}")
    data = ds.Dataset.load(config["dataset"])
    out = _ensure_out(config)
    mlp = _mlp_config(config, data.feature_dim)
    folds = config.get("folds", {})
    train_idx, val_idx = ds.make_folds(
        data, int(folds.get("n", 5)), int(folds.get("p", 1)),
        int(folds.get("rotation", 0)), seed=config["seed"])
    model = approximator.fit_on_dataset(mlp, data, train_idx, val_idx)
    model.metadata["config_hash"] = _config_hash(config)
    weights_path = os.path.join(out, "weights.json")
    approximator.save_model(model, weights_path)
    _write_csv(os.path.join(out, "loss_curve.csv"),
               ["epoch", "train_loss", "val_loss"],
               [(h["epoch"], h["train_loss"], h["val_loss"])
                for h in model.metadata["history"]])
    print(f"trained {mlp.layer_sizes} for {model.metadata['epochs_run']} epochs; "
          f"val MSE {model.metadata['final_val_loss']:.6e}")
    print(f"wrote {weights_path}")
    return EXIT_OK


def _scenario_from_config(config, grid):
    ci = int(config.get("condition", 0))
    di = int(config.get("disturbance", 0))
    if not 0 <= ci < len(grid.operating_conditions):
        raise UsageError(f"condition index {ci} out of range")
    if not 0 <= di < len(grid.disturbances):
        raise UsageError(f"disturbance index {di} out of range")
    return coordinator.Scenario(
        condition=grid.operating_conditions[ci],
        disturbance=grid.disturbances[di],
        timing=_timing(config),
        label=f"condition {ci}, disturbance {di}",
    )


def cmd_coordinate(args):
    config = _load_config(args)
    for key in ("weights", "case", "grid"):
        if key not in config:
            raise UsageError(f"coordinate needs --{key}")
    if not os.path.exists(config["weights"]):
        raise UsageError(f"weights file not found: {config['weights']}")
    model = approximator.load_model(config["weights"])
    case = _resolve_case(config["case"])
    grid = _resolve_grid(config["grid"])
    scenario = _scenario_from_config(config, grid)
    out = _ensure_out(config)

    variant = ds.apply_condition(case, scenario.condition)
    setup = dynamics.prepare(variant)
    nc = len(variant.ibrs)
    events = dynamics.EventSchedule(
        fault_bus=scenario.disturbance.fault_bus,
        fault_time=scenario.timing.fault_time,
        clearing_time=scenario.timing.fault_time + scenario.disturbance.duration,
        activation_time=scenario.timing.activation_time,
        end_time=scenario.timing.end_time, gamma=(0,) * nc)
    traj = dynamics.simulate(variant, events, setup=setup)
    y01 = netmodel.line_flows(variant, setup.pf)
    y02 = dynamics.snapshot_features(traj, variant, scenario.clearing_time)
    result = coordinator.dic_select(model, np.concatenate([y01, y02]), nc)

    combos = approximator.all_combinations(nc)
    _write_csv(os.path.join(out, "predictions.csv"),
               ["k", "gamma", "predicted_s_inf"],
               [(k, "".join(map(str, g)), float(p))
                for k, (g, p) in enumerate(zip(combos, result.predictions))])
    decision = {
        "gamma_star": list(result.gamma),
        "predictions": [float(p) for p in result.predictions],
        "wall_time_ms": result.wall_time_ms,
        "tie_note": result.tie_note,
        "scenario": scenario.describe(),
        "config_hash": _config_hash(config),
        "seed": config["seed"],
    }
    with open(os.path.join(out, "decision.json"), "w") as f:
        json.dump(decision, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"gamma* = {''.join(map(str, result.gamma))} "
          f"(decision wall time {result.wall_time_ms:.2f} ms)")
    return EXIT_OK


def _policy_report_rows(report):
    return [(r.name,
             None if r.gamma is None else "".join(str(int(q)) for q in r.gamma),
             r.s_inf, r.reduction_pct, r.converged, r.trajectory_path, r.error)
            for r in report.rows]


def cmd_compare(args):
    config = _load_config(args)
    for key in ("case", "grid"):
        if key not in config:
            raise UsageError(f"compare needs --{key}")
    case = _resolve_case(config["case"])
    grid = _resolve_grid(config["grid"])
    scenario = _scenario_from_config(config, grid)
    out = _ensure_out(config)
    policies = config.get("policies", ["NC", "FC", "MBC", "DIC"])
    if isinstance(policies, str):
        policies = [p.strip().upper() for p in policies.split(",") if p.strip()]
    model = None
    if "DIC" in policies:
        if "weights" not in config:
            raise UsageError("DIC policy needs --weights")
        if not os.path.exists(config["weights"]):
            raise UsageError(f"weights file not found: {config['weights']}")
        model = approximator.load_model(config["weights"])
    fixed = config.get("fixed_combo")
    if isinstance(fixed, str):
        fixed = [int(c) for c in fixed]

    report = coordinator.evaluate_policies(case, scenario, model=model,
                                           fixed_combo=fixed, policies=policies,
                                           out_dir=out)
    _write_csv(os.path.join(out, "policies.csv"),
               ["policy", "gamma", "s_inf", "reduction_pct", "converged",
                "trajectory", "error"],
               _policy_report_rows(report))
    summary = {
        "scenario": report.scenario,
        "rows": [vars(r) for r in report.rows],
        "config_hash": _config_hash(config),
        "seed": config["seed"],
    }
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    for r in report.rows:
        if r.error:
            print(f"{r.name}: FAILED ({r.error})")
        else:
            print(f"{r.name}: gamma={''.join(str(int(q)) for q in r.gamma)} "
                  f"S={r.s_inf:.6f} reduction={r.reduction_pct:+.2f}%")
    return EXIT_DOMAIN if report.failed else EXIT_OK


def cmd_delays(args):
    config = _load_config(args)
    for key in ("case", "grid", "weights"):
        if key not in config:
            raise UsageError(f"delays needs --{key}")
    if not os.path.exists(config["weights"]):
        raise UsageError(f"weights file not found: {config['weights']}")
    case = _resolve_case(config["case"])
    grid = _resolve_grid(config["grid"])
    model = approximator.load_model(config["weights"])
    scenario = _scenario_from_config(config, grid)
    out = _ensure_out(config)
    delays = config.get("delays", [0.149, 2.0])
    if isinstance(delays, str):
        delays = [float(v) for v in delays.split(",") if v.strip()]

    report = coordinator.delay_sweep(case, scenario, model, delays)
    _write_csv(os.path.join(out, "delays.csv"),
               ["delay", "gamma", "s_inf", "reduction_pct", "converged",
                "trajectory", "error"],
               _policy_report_rows(report))
    for r in report.rows:
        if r.error:
            print(f"{r.name}: FAILED ({r.error})")
        else:
            print(f"{r.name}: S={r.s_inf:.6f} reduction={r.reduction_pct:+.2f}%")
    return EXIT_DOMAIN if report.failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tacoord",
        description="Total-action based coordination of IBR damping controllers")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="experiment config JSON (flags win)")
        p.add_argument("--case", help="case JSON path or builtin name")
        p.add_argument("--grid", help="scenario grid JSON path or builtin name")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--jobs", type=int, help="max concurrent simulations")

    p = sub.add_parser("powerflow", help="solve and print the operating point")
    add_common(p)
    p.set_defaults(fn=cmd_powerflow)

    p = sub.add_parser("collect", help="run the scenario grid and write the dataset")
    add_common(p)
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train", help="fit the approximator on a dataset")
    add_common(p)
    p.add_argument("--dataset", help="dataset JSONL path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("coordinate", help="select the optimal switching combination")
    add_common(p)
    p.add_argument("--weights", help="trained weights JSON")
    p.add_argument("--condition", type=int, help="grid condition index")
    p.add_argument("--disturbance", type=int, help="grid disturbance index")
    p.set_defaults(fn=cmd_coordinate)

    p = sub.add_parser("compare", help="evaluate NC/FC/MBC/DIC on one scenario")
    add_common(p)
    p.add_argument("--weights", help="trained weights JSON")
    p.add_argument("--policies", help="comma list from NC,FC,MBC,DIC")
    p.add_argument("--fixed-combo", dest="fixed_combo", help="FC bits, e.g. 001")
    p.add_argument("--condition", type=int, help="grid condition index")
    p.add_argument("--disturbance", type=int, help="grid disturbance index")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("delays", help="DIC delay sweep on one scenario")
    add_common(p)
    p.add_argument("--weights", help="trained weights JSON")
    p.add_argument("--delays", help="comma list of delays in seconds")
    p.add_argument("--condition", type=int, help="grid condition index")
    p.add_argument("--disturbance", type=int, help="grid disturbance index")
    p.set_defaults(fn=cmd_delays)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TacoordError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
