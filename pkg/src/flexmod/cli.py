"""Command-line interface: ``flexmod simulate | schedule | bound | shapley | compare``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import statistics
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, Strategy
from .data import DataError
from .fedsim import ExperimentResult, build_dataset, run_experiment
from .importance import normalize_importance, shapley_values
from .model import GlobalModel
from .nn import ShapeError
from .scheduler import (BoundParams, CombinationTable, bound_from_sizes, combination_label,
                        order_schedule, ordering_guaranteed, solve_allocation, time_cost, utility)

SUMMARY_SCHEMA_VERSION = 1
MAX_ALL_ORDERS = 7

log = logging.getLogger("flexmod")


class UsageError(Exception):
    """Bad arguments; maps to exit code 2."""


# ------------------------------------------------------------------ writers

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def rounds_header(m: int, s: int) -> list[str]:
    return (["round", "beta", "acc", "loss", "reward", "budget_used"]
            + [f"omega_{i + 1}" for i in range(m)] + [f"gamma_{i + 1}" for i in range(m)]
            + [f"alloc_{i + 1}" for i in range(s)])


def write_rounds_csv(records, m: int, s: int, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(rounds_header(m, s))
        for r in records:
            w.writerow([_fmt(r.round), _fmt(r.beta), _fmt(r.acc), _fmt(r.loss), _fmt(r.reward),
                        _fmt(r.budget_used)] + [_fmt(v) for v in r.omega]
                       + [_fmt(v) for v in r.gamma] + [_fmt(v) for v in r.allocation])


def write_allocations_csv(records, s: int, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "slots", "budget_used", "budget"] + [f"alloc_{i + 1}" for i in range(s)])
        for r in records:
            w.writerow([r.round, len(r.schedule), r.budget_used, r.budget] + [int(v) for v in r.allocation])


def summary(result: ExperimentResult, config: ExperimentConfig) -> dict:
    return {
        "schema_version": SUMMARY_SCHEMA_VERSION,
        "final_acc": result.final_acc,
        "rounds_to_target": result.rounds_to_target(config.run.target_acc),
        "rounds": len(result.records),
        "total_budget_used": int(sum(r.budget_used for r in result.records)),
        "total_idle_time": result.total_idle_time,
        "config_hash": config.config_hash(),
    }


def write_run(result: ExperimentResult, config: ExperimentConfig, out: Path, plots: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    m = config.num_modalities
    s = (1 << m) - 1
    write_rounds_csv(result.records, m, s, out / "rounds.csv")
    write_allocations_csv(result.records, s, out / "allocations.csv")
    (out / "summary.json").write_text(json.dumps(summary(result, config), indent=2) + "\n", encoding="utf-8")
    config.save(out / "config.json")
    result.model.save(out / "model.npz")
    result.simulation.agent.save(out / "agent.npz")
    if plots and result.records:
        from .plotting import plot_accuracy, plot_allocation

        names = config.dataset.modalities
        labels = [combination_label(c, names)
                  for c in CombinationTable(m, config.time_table()).members]
        plot_accuracy(result.records, out / "accuracy.png", config.run.target_acc)
        plot_allocation(result.records, labels, out / "allocation.png")


# ----------------------------------------------------------------- commands

def _load_config(path, seed=None, out=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    run = {}
    if seed is not None:
        run["seed"] = seed
    if out is not None:
        run["output_dir"] = str(out)
    return cfg.with_overrides(run=run) if run else cfg


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, args.seed, args.out)
    result = run_experiment(cfg)
    out = Path(cfg.run.output_dir)
    write_run(result, cfg, out, plots=not args.no_plots)
    print(json.dumps(summary(result, cfg)))
    return 0


def _vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()], dtype=float)
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from None


def cmd_schedule(args) -> int:
    cfg = _load_config(args.config)
    m = cfg.num_modalities
    omega, gamma = _vector(args.omega, "omega"), _vector(args.gamma, "gamma")
    for name, v in (("omega", omega), ("gamma", gamma)):
        if len(v) != m:
            raise UsageError(f"--{name}: expected {m} values, got {len(v)}")
    if not 0.0 <= args.beta <= 1.0:
        raise UsageError("--beta must lie in [0, 1]")
    budget = cfg.schedule.budget if args.budget is None else args.budget
    if budget < 0:
        raise UsageError("--budget must be non-negative")
    table = CombinationTable.from_indices(cfg.time_table(), omega, gamma)
    alloc = solve_allocation(table, args.beta, budget)
    sched = order_schedule(alloc, table)
    names = cfg.dataset.modalities
    labels = [combination_label(c, names) for c in table.members]
    used = time_cost(alloc, table)
    print(json.dumps({
        "beta": args.beta,
        "allocation": {labels[i]: int(alloc[i]) for i in range(table.size)},
        "allocation_vector": [int(v) for v in alloc],
        "schedule": [labels[i] for i in sched],
        "utility": utility(alloc, table, args.beta),
        "budget_used": used,
        "budget": budget,
        "idle": budget - used,
    }, indent=2))
    return 0


def cmd_bound(args) -> int:
    try:
        sizes = [int(v) for v in args.schedule.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--schedule: expected comma-separated integers, got {args.schedule!r}") from None
    if not sizes:
        raise UsageError("--schedule must not be empty")
    if any(not 1 <= c <= args.M for c in sizes):
        raise UsageError(f"--schedule: combination sizes must lie in [1, {args.M}]")
    try:
        params = BoundParams(args.eta, args.L, args.delta, args.M)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = {"schedule": sizes, "bound": bound_from_sizes(sizes, params)}
    if args.all_orders:
        if len(sizes) > MAX_ALL_ORDERS:
            raise UsageError(f"--all-orders supports at most {MAX_ALL_ORDERS} slots, got {len(sizes)}")
        table = sorted({p: bound_from_sizes(p, params) for p in itertools.permutations(sizes)}.items(),
                       key=lambda kv: (kv[1], [-c for c in kv[0]]))
        desc = tuple(sorted(sizes, reverse=True))
        best = table[0][1]
        out["orders"] = [{"order": list(p), "bound": b} for p, b in table]
        out["descending"] = {"order": list(desc), "bound": bound_from_sizes(desc, params)}
        out["descending_is_minimal"] = bool(out["descending"]["bound"] <= best)
        out["ordering_guaranteed"] = ordering_guaranteed(params, len(sizes))
    print(json.dumps(out, indent=2))
    return 0


def cmd_shapley(args) -> int:
    cfg = _load_config(args.config, args.seed)
    try:
        model = GlobalModel.load(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"--checkpoint: cannot load {args.checkpoint}: {exc}") from None
    _, val = build_dataset(cfg)
    if model.num_modalities != cfg.num_modalities or model.num_classes != val.num_classes or \
            any(e.in_dim != d for e, d in zip(model.encoders, val.dims)):
        raise UsageError("checkpoint does not match the configured model shape "
                         f"(modalities {model.num_modalities} vs {cfg.num_modalities}, "
                         f"inputs {[e.in_dim for e in model.encoders]} vs {val.dims})")
    raw, cache = shapley_values(model, val, return_cache=True)
    names = cfg.dataset.modalities
    m = model.num_modalities
    full = frozenset(range(m))
    try:
        norm = normalize_importance(raw).tolist()
    except ValueError:
        norm = None
    print(json.dumps({
        "subset_losses": {(combination_label(sorted(s), names) or "{}"): v
                          for s, v in sorted(cache.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))},
        "raw": {names[i]: float(raw[i]) for i in range(m)},
        "normalized": None if norm is None else {names[i]: norm[i] for i in range(m)},
        "efficiency_residual": abs(float(raw.sum()) - (cache[full] - cache[frozenset()])),
    }, indent=2))
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args.config, out=args.out)
    names = cfg.dataset.modalities
    strategies = [Strategy.parse(s, names) for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise UsageError("--strategies: at least one strategy required")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds: expected comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds: at least one seed required")
    out = Path(cfg.run.output_dir)
    rows = []
    per_strategy: dict[str, dict] = {}
    for strat in strategies:
        label = strat.label(names)
        rtts, finals = [], []
        for seed in seeds:
            cell_cfg = cfg.with_overrides(run={"seed": seed})
            result = run_experiment(cell_cfg, strat)
            cell = out / "cells" / f"{label.replace(':', '-')}_seed{seed}"
            cell.mkdir(parents=True, exist_ok=True)
            m = cfg.num_modalities
            write_rounds_csv(result.records, m, (1 << m) - 1, cell / "rounds.csv")
            for r in result.records:
                rows.append({"strategy": label, "seed": seed, "round": r.round, "acc": r.acc})
            rtts.append(result.rounds_to_target(cfg.run.target_acc))
            finals.append(result.final_acc)
            log.info("%s seed=%d final_acc=%.4f rounds_to_target=%s", label, seed, finals[-1], rtts[-1])
        per_strategy[label] = {
            "rounds_to_target": rtts,
            "median_rounds_to_target": median_rounds(rtts),
            "median_final_acc": statistics.median(finals),
        }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "seed", "round", "acc"])
        for row in rows:
            w.writerow([row["strategy"], row["seed"], row["round"], _fmt(row["acc"])])
    summary_doc = {"schema_version": SUMMARY_SCHEMA_VERSION, "target_acc": cfg.run.target_acc,
                   "seeds": seeds, "strategies": per_strategy}
    (out / "compare_summary.json").write_text(json.dumps(summary_doc, indent=2) + "\n", encoding="utf-8")
    if not args.no_plots and rows:
        from .plotting import plot_compare

        plot_compare(rows, out / "compare.png", cfg.run.target_acc)
    print(json.dumps(summary_doc))
    return 0


def median_rounds(values: Sequence[int | None]) -> float | None:
    """Median with never-reached (``None``) treated as infinitely many rounds."""
    med = statistics.median([float("inf") if v is None else v for v in values])
    return None if med == float("inf") else med


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flexmod", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one experiment and write rounds.csv, summary.json, figures")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("schedule", help="solve one allocation problem and print it as JSON")
    s.add_argument("--config", required=True)
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--omega", required=True, help="per-modality quality, comma-separated")
    s.add_argument("--gamma", required=True, help="per-modality importance, comma-separated")
    s.add_argument("--budget", type=int, help="override schedule.budget")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("bound", help="divergence bound of a slot order")
    s.add_argument("--schedule", required=True, help="combination sizes per slot, comma-separated")
    s.add_argument("--eta", type=float, required=True)
    s.add_argument("--L", type=float, required=True)
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--M", type=int, required=True)
    s.add_argument("--all-orders", action="store_true", help=f"tabulate every order (<= {MAX_ALL_ORDERS} slots)")
    s.set_defaults(func=cmd_bound)

    s = sub.add_parser("shapley", help="Shapley importance of a saved model on the validation split")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_shapley)

    s = sub.add_parser("compare", help="run a strategy x seed matrix and write compare.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--strategies", required=True)
    s.add_argument("--seeds", required=True)
    s.add_argument("--out")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ShapeError as exc:
        print(f"error: shape mismatch: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
