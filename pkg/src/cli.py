import argparse
import asyncio
import logging
import sys
from pathlib import Path

import pandas as pd
import yaml

from src.config import DEFAULT_JOBS, LOG_LEVEL
from src.services.memory_reducer import (
    InfeasiblePlanError,
    build_device_chain,
    plan_recomputation,
)
from src.services.model_graph import load_model_graph, parameter_state_bytes
from src.services.reporting import (
    aggregate,
    cell_name,
    devices_frame,
    plan_frame,
    read_rounds,
    rounds_frame,
    write_csv,
    write_yaml,
)
from src.services.scenario import ConfigError, build_scenario, load_scenario
from src.services.sim_engine import (
    AllDropoutError,
    fleet_records,
    generate_fleet,
    plan_selection,
    run_simulation,
)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_ALL_DROPOUT = 3
EXIT_INFEASIBLE = 4

logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO), format="%(levelname)s %(message)s")


def _load(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_scenario(args.scenario, overrides)


def cmd_run(args) -> int:
    config = _load(args)
    result = run_simulation(config, trace_mec=args.trace_mec)
    out = Path(args.out)
    write_csv(rounds_frame(result.reports), out / "rounds.csv")
    write_csv(devices_frame(result.reports), out / "devices.csv")
    write_yaml(result.summary, out / "summary.yaml")
    if args.trace_mec:
        write_csv(pd.DataFrame(result.mec_trace), out / "mec_trace.csv")
    logging.info("run finished: median T_system %.3fs, reports in %s", result.summary["t_system_median"], out)
    return EXIT_OK


def _run_cell(base: dict, policy: str, seed: int, out: Path) -> dict:
    config = build_scenario(base["raw"], [*base["overrides"], f"policy.name={policy}", f"seed={seed}"], base["dir"])
    result = run_simulation(config)
    write_csv(rounds_frame(result.reports), out / f"{cell_name(policy, seed)}.csv")
    return result.summary


async def _sweep(args, base: dict, policies: list[str], seeds: list[int], out: Path) -> int:
    semaphore = asyncio.Semaphore(max(1, args.jobs))
    failed = []

    async def cell(policy: str, seed: int):
        async with semaphore:
            try:
                await asyncio.to_thread(_run_cell, base, policy, seed, out)
            except Exception as e:
                logging.exception("sweep cell %s failed: %s", cell_name(policy, seed), e)
                failed.append(cell_name(policy, seed))

    await asyncio.gather(*(cell(p, s) for p in policies for s in seeds))

    frames = {}
    for p in policies:
        for s in seeds:
            name = cell_name(p, s)
            if name not in failed:
                frames[name] = read_rounds(out / f"{name}.csv")
    if frames:
        write_csv(aggregate(frames), out / "aggregate.csv")
    if failed:
        logging.error("sweep: %s of %s cells failed: %s", len(failed), len(policies) * len(seeds), ", ".join(sorted(failed)))
        return EXIT_FAILED
    return EXIT_OK


def cmd_sweep(args) -> int:
    path = Path(args.scenario)
    config = load_scenario(path, args.set)  # validates before any cell starts
    with path.open("r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    policies = [p.strip() for p in args.policies.split(",") if p.strip()] or [config.policy.name]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()] if args.seeds else [config.seed]
    for p in policies:
        build_scenario(raw, [*(args.set or []), f"policy.name={p}"], path.parent)
    base = {"raw": raw, "overrides": list(args.set or []), "dir": path.parent}
    return asyncio.run(_sweep(args, base, policies, seeds, Path(args.out)))


def cmd_select(args) -> int:
    config = _load(args)
    assignment, _ = plan_selection(config)
    record = {
        "policy": config.policy.name,
        "seed": config.seed,
        "predicted_objective": assignment.predicted_objective,
        "devices": [
            {"device_id": e.device_id, "alpha": int(e.selected), "cut": e.cut}
            for e in assignment.entries
        ],
    }
    write_yaml(record, Path(args.out) / "selection.yaml")
    chosen = ", ".join(f"{d}@{j}" for d, j in sorted(assignment.cuts.items()))
    print(f"selected: {chosen}")
    if assignment.predicted_objective is not None:
        print(f"predicted objective: {assignment.predicted_objective:.6f}")
    return EXIT_OK


def cmd_plan_memory(args) -> int:
    graph = load_model_graph(args.model)
    chain, flops = build_device_chain(graph, args.cut, args.batch, args.segment_size)
    cap = args.budget - parameter_state_bytes(graph, args.cut)
    try:
        plan = plan_recomputation(chain, flops, cap)
    except InfeasiblePlanError as e:
        print(f"infeasible: layer {e.layer_id} needs {e.required_bytes:.0f} B, cap {e.cap_bytes:.0f} B", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(plan_frame(plan).to_string(index=False))
    print(f"peak: {plan.peak_memory_bytes:.0f} B  overhead: {plan.extra_forward_flops:.0f} FLOPs")
    return EXIT_OK


def cmd_fleet_gen(args) -> int:
    config = _load(args)
    horizon = (config.policy.rounds + 1) * config.dynamics.round_period_seconds
    devices = generate_fleet(config.fleet, config.dynamics, config.seed, horizon)
    write_yaml({"classes": config.fleet.classes, "devices": fleet_records(devices)}, Path(args.out) / "fleet.yaml")
    print(f"{len(devices)} devices written to {Path(args.out) / 'fleet.yaml'}")
    return EXIT_OK


def cmd_report(args) -> int:
    frames = {Path(p).stem: read_rounds(p) for p in args.paths}
    table = aggregate(frames)
    print(table.to_string(index=False))
    if args.out:
        write_csv(table, Path(args.out) / "aggregate.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitsim", description="Split federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_flags(p, out_default="out"):
        p.add_argument("--scenario", required=True)
        p.add_argument("--out", default=out_default)
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    run = sub.add_parser("run", help="run one scenario")
    scenario_flags(run)
    run.add_argument("--trace-mec", action="store_true")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="policies x seeds")
    sweep.add_argument("--scenario", required=True)
    sweep.add_argument("--out", default="out")
    sweep.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sweep.add_argument("--policies", default="")
    sweep.add_argument("--seeds", default="")
    sweep.add_argument("--jobs", type=int, default=DEFAULT_JOBS)
    sweep.set_defaults(func=cmd_sweep)

    select = sub.add_parser("select", help="round-0 selection only")
    scenario_flags(select)
    select.set_defaults(func=cmd_select)

    plan = sub.add_parser("plan-memory", help="recomputation plan for one cut and budget")
    plan.add_argument("--model", required=True)
    plan.add_argument("--cut", type=int, required=True)
    plan.add_argument("--budget", type=float, required=True)
    plan.add_argument("--batch", type=int, default=1)
    plan.add_argument("--segment-size", type=int)
    plan.set_defaults(func=cmd_plan_memory)

    fleet = sub.add_parser("fleet-gen", help="write a generated fleet")
    scenario_flags(fleet)
    fleet.set_defaults(func=cmd_fleet_gen)

    report = sub.add_parser("report", help="aggregate round CSVs")
    report.add_argument("paths", nargs="+")
    report.add_argument("--out")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logging.error("config error: %s", e)
        return EXIT_CONFIG
    except AllDropoutError as e:
        logging.error("%s", e)
        return EXIT_ALL_DROPOUT
    except InfeasiblePlanError as e:
        logging.error("infeasible plan: %s", e)
        return EXIT_INFEASIBLE
    except (FileNotFoundError, ValueError) as e:
        logging.error("config error: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
