"""Command-line surface: plan, eval, simulate, sweep, traffic, cost, dag.

All commands are deterministic given (config, seed); structured outputs are
JSON with sorted keys, sweeps are CSV, graphs are DOT.  Exit codes: 0
success, 2 configuration error, 3 no feasible plan.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

from .exec_sim import RoutingModel, simulate_plan
from .hw_profile import (
    BUILTIN_PROFILES,
    Component,
    HardwareProfile,
    LatencyTable,
    builtin_profile,
    ingest_profile_file,
    synth_profile,
)
from .memory_model import (
    BatchingPlan,
    NoFeasibleB,
    Phase,
    WorkloadSpec,
)
from .model_catalog import (
    ModelSpec,
    ModelSpecError,
    PRESET_DOCUMENTS,
    UnknownPreset,
    load_model_spec_file,
    preset,
)
from .offload_dag import build_forward_dag, build_layer_dag, dag_to_json, export_dot
from .plan_search import (
    EmptySearchSpace,
    PlanEvaluation,
    SearchSpace,
    evaluate_plan,
    search,
)
from .traffic_cost import (
    FullKvOffload,
    GpuKvCache,
    cost_report,
    dataset_traffic,
    traffic_rows,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_PLAN = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def plan_to_doc(plan: BatchingPlan) -> dict[str, Any]:
    return {
        "B": plan.B,
        "b_a": plan.b_a,
        "b_e": plan.b_e,
        "omega": plan.omega,
        "s_expert": plan.s_expert,
        "s_params": plan.s_params,
    }


def plan_from_doc(doc: dict[str, Any]) -> BatchingPlan:
    if "plan" in doc:  # accept a full evaluation document
        doc = doc["plan"]
    try:
        return BatchingPlan(
            B=int(doc["B"]),
            b_a=int(doc["b_a"]),
            b_e=int(doc["b_e"]),
            omega=float(doc["omega"]),
            s_expert=int(doc["s_expert"]),
            s_params=int(doc["s_params"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed plan document: {exc}") from exc


def evaluation_to_doc(ev: PlanEvaluation) -> dict[str, Any]:
    return {
        "plan": plan_to_doc(ev.plan),
        "phase": ev.phase.value,
        "t_forward": ev.t_forward if math.isfinite(ev.t_forward) else None,
        "throughput": ev.throughput,
        "feasible": ev.feasible,
        "footprint": dataclasses.asdict(ev.footprint),
    }


def _write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def resolve_model(name_or_path: str) -> ModelSpec:
    if name_or_path in PRESET_DOCUMENTS:
        return preset(name_or_path)
    if os.path.exists(name_or_path):
        try:
            return load_model_spec_file(name_or_path)
        except (ModelSpecError, json.JSONDecodeError, OSError) as exc:
            raise ConfigError(f"cannot load model spec: {exc}") from exc
    raise ConfigError(
        f"model {name_or_path!r} is neither a preset "
        f"({', '.join(sorted(PRESET_DOCUMENTS))}) nor a file"
    )


def resolve_profile(
    name_or_path: str, model: ModelSpec
) -> tuple[HardwareProfile, list[LatencyTable]]:
    if name_or_path in BUILTIN_PROFILES:
        hw = builtin_profile(name_or_path)
        return hw, synth_profile(hw, model)
    if os.path.exists(name_or_path):
        try:
            hw, tables = ingest_profile_file(name_or_path)
        except (ValueError, OSError) as exc:
            raise ConfigError(f"cannot load profile: {exc}") from exc
        if not tables:
            tables = synth_profile(hw, model)
        return hw, tables
    raise ConfigError(
        f"profile {name_or_path!r} is neither builtin "
        f"({', '.join(sorted(BUILTIN_PROFILES))}) nor a file"
    )


def resolve_workload(args: argparse.Namespace, phase: Phase) -> WorkloadSpec:
    try:
        return WorkloadSpec(
            prompt_len=args.prompt_len,
            decode_len=args.decode_len,
            num_sequences=args.num_sequences,
            phase=phase,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_seed(args: argparse.Namespace) -> int:
    env = os.environ.get("MOE_PLANNER_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"MOE_PLANNER_SEED must be an integer: {env!r}") from exc
    return args.seed


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(float(x)) for x in text.split(",") if x.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def resolve_space(args: argparse.Namespace) -> SearchSpace:
    space = SearchSpace.default()
    overrides: dict[str, Any] = {}
    if args.b_a_grid:
        overrides["b_a_grid"] = _int_list(args.b_a_grid)
    if args.b_e_grid:
        overrides["b_e_grid"] = _int_list(args.b_e_grid)
    if args.omega_grid:
        overrides["omega_grid"] = _float_list(args.omega_grid)
    if args.s_expert_slots:
        overrides["s_expert_slots_grid"] = _int_list(args.s_expert_slots)
    if args.s_params_fracs:
        overrides["s_params_fracs"] = _float_list(args.s_params_fracs)
    if args.prefill_b_grid:
        overrides["prefill_B_grid"] = _int_list(args.prefill_b_grid)
    try:
        return replace(space, **overrides) if overrides else space
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load_plan(path: str) -> BatchingPlan:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return plan_from_doc(json.load(f))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read plan file {path!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_plan(args: argparse.Namespace) -> int:
    model = resolve_model(args.model)
    hw, tables = resolve_profile(args.profile, model)
    space = resolve_space(args)
    out = Path(args.out_dir)
    phases = (
        [Phase.PREFILL, Phase.DECODE]
        if args.phase == "both"
        else [Phase(args.phase)]
    )
    for phase in phases:
        workload = resolve_workload(args, phase)
        ev = search(model, hw, tables, workload, space, phase)
        name = "plan.json" if len(phases) == 1 else f"plan_{phase.value}.json"
        _write_json(out / name, evaluation_to_doc(ev))
        p = ev.plan
        print(
            f"{phase.value}: throughput={ev.throughput:.3f} tok/s "
            f"B={p.B} b_a={p.b_a} b_e={p.b_e} omega={p.omega}"
        )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model = resolve_model(args.model)
    hw, tables = resolve_profile(args.profile, model)
    phase = Phase(args.phase)
    workload = resolve_workload(args, phase)
    plan = _load_plan(args.plan)
    ev = evaluate_plan(model, hw, tables, workload, plan, phase)
    _write_json(Path(args.out_dir) / "eval.json", evaluation_to_doc(ev))
    print(
        f"{phase.value}: throughput={ev.throughput:.3f} tok/s "
        f"feasible={ev.feasible}"
    )
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    model = resolve_model(args.model)
    hw, tables = resolve_profile(args.profile, model)
    phase = Phase(args.phase)
    workload = resolve_workload(args, phase)
    plan = _load_plan(args.plan)
    routing = RoutingModel(
        mode=args.routing_mode,
        concentration=args.concentration,
        seed=resolve_seed(args),
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as stream:
            report = simulate_plan(
                model, hw, tables, workload, plan, routing, phase, stream
            )
    else:
        report = simulate_plan(model, hw, tables, workload, plan, routing, phase)
    with open(out / "sim_report.json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
        f.write("\n")
    print(
        f"{phase.value}: makespan={report.makespan:.6f} s "
        f"throughput={report.throughput:.3f} tok/s oom={report.oom_flag}"
    )
    return EXIT_OK


SWEEP_VARIABLES = ("omega", "b_a", "b_e", "s_params", "num_sequences")


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.variable not in SWEEP_VARIABLES:
        raise ConfigError(
            f"unknown sweep variable {args.variable!r}; "
            f"choose from {', '.join(SWEEP_VARIABLES)}"
        )
    model = resolve_model(args.model)
    hw, tables = resolve_profile(args.profile, model)
    phase = Phase(args.phase)
    workload = resolve_workload(args, phase)
    plan = _load_plan(args.plan)
    out = Path(args.out_dir)

    if args.variable == "num_sequences":
        if args.kv_capacity is None:
            raise ConfigError("num_sequences sweeps need --kv-capacity")
        grid = (
            _int_list(args.grid)
            if args.grid
            else tuple(plan.B * (2**i) for i in range(7))
        )
        policies = [
            ("full_kv_offload", FullKvOffload()),
            ("gpu_kv_cache", GpuKvCache(int(args.kv_capacity))),
        ]
        rows = traffic_rows(model, hw, workload, plan, policies, grid)
        _write_csv(out / "sweep.csv", ("num_sequences", "policy", "bytes"), rows)
        print(f"wrote {len(rows)} rows")
        return EXIT_OK

    if args.variable == "omega":
        grid: Sequence[Any] = (
            _float_list(args.grid)
            if args.grid
            else tuple(round(0.1 * i, 1) for i in range(11))
        )
    else:
        if not args.grid:
            raise ConfigError(f"{args.variable} sweeps need an explicit --grid")
        grid = _int_list(args.grid)

    rows = []
    for value in grid:
        candidate = replace(plan, **{args.variable: value})
        ev = evaluate_plan(model, hw, tables, workload, candidate, phase)
        t = ev.t_forward if math.isfinite(ev.t_forward) else ""
        rows.append((args.variable, value, t, ev.throughput, ev.feasible))
    _write_csv(
        out / "sweep.csv",
        ("variable", "value", "t_forward", "throughput", "feasible"),
        rows,
    )
    print(f"wrote {len(rows)} rows")
    return EXIT_OK


def cmd_traffic(args: argparse.Namespace) -> int:
    model = resolve_model(args.model)
    hw, _ = resolve_profile(args.profile, model)
    phase = Phase(args.phase)
    workload = resolve_workload(args, phase)
    plan = _load_plan(args.plan)
    policies: list[tuple[str, Any]] = [("full_kv_offload", FullKvOffload())]
    if args.kv_capacity is not None:
        policies.append(("gpu_kv_cache", GpuKvCache(int(args.kv_capacity))))
    rows = [
        (workload.num_sequences, name, dataset_traffic(model, hw, workload, pol, plan))
        for name, pol in policies
    ]
    _write_csv(
        Path(args.out_dir) / "traffic.csv",
        ("num_sequences", "policy", "bytes"),
        rows,
    )
    for n, name, b in rows:
        print(f"{name}: {b} bytes for {n} sequences")
    return EXIT_OK


def cmd_cost(args: argparse.Namespace) -> int:
    try:
        with open(args.components, "r", encoding="utf-8") as f:
            docs = json.load(f)
        components = [
            Component(d["name"], float(d["power_watts"]), float(d["price"]))
            for d in docs
        ]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read components file: {exc}") from exc
    if not components:
        raise ConfigError("component list must be non-empty")
    report = cost_report(components, args.throughput)
    _write_json(Path(args.out_dir) / "cost.json", dataclasses.asdict(report))
    print(
        f"power={report.total_power_watts:g} W price={report.total_price:g} "
        f"tokens/J={report.tokens_per_joule:.6g}"
    )
    return EXIT_OK


def cmd_dag(args: argparse.Namespace) -> int:
    if args.dag_command != "export":
        raise ConfigError("usage: dag export ...")
    model = resolve_model(args.model)
    hw, tables = resolve_profile(args.profile, model)
    phase = Phase(args.phase)
    workload = resolve_workload(args, phase)
    plan = _load_plan(args.plan)
    if args.single_layer:
        dag = build_layer_dag(model, hw, tables, workload, plan, phase)
    else:
        dag = build_forward_dag(model, hw, tables, workload, plan, phase)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dot_path = out / "dag.dot"
    with open(dot_path, "w", encoding="utf-8") as f:
        f.write(export_dot(dag))
    if args.json:
        with open(out / "dag.json", "w", encoding="utf-8") as f:
            f.write(dag_to_json(dag))
            f.write("\n")
    print(f"wrote {dot_path} ({len(dag.nodes)} nodes, {len(dag.edges)} edges)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", default="tiny-test",
                        help="preset name or model spec JSON path")
    common.add_argument("--profile", default="tiny-test",
                        help="builtin profile name or profiling JSON path")
    common.add_argument("--prompt-len", type=int, default=64)
    common.add_argument("--decode-len", type=int, default=32)
    common.add_argument("--num-sequences", type=int, default=1024)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--seed", type=int, default=0,
                        help="overridden by MOE_PLANNER_SEED when set")

    parser = argparse.ArgumentParser(
        prog="moe-planner",
        description="Plan and simulate module-based batching for offloaded "
        "MoE inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="search for the best plan")
    p.add_argument("--phase", choices=["prefill", "decode", "both"], default="decode")
    p.add_argument("--b-a-grid", default="")
    p.add_argument("--b-e-grid", default="")
    p.add_argument("--omega-grid", default="")
    p.add_argument("--s-expert-slots", default="")
    p.add_argument("--s-params-fracs", default="")
    p.add_argument("--prefill-b-grid", default="")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved plan")
    p.add_argument("--phase", choices=["prefill", "decode"], default="decode")
    p.add_argument("--plan", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", parents=[common], help="simulate a saved plan")
    p.add_argument("--phase", choices=["prefill", "decode"], default="decode")
    p.add_argument("--plan", required=True)
    p.add_argument("--routing-mode", choices=["even", "sampled"], default="even")
    p.add_argument("--concentration", type=float, default=1.0)
    p.add_argument("--trace", default="", help="line-delimited JSON event trace path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common], help="sweep one plan variable")
    p.add_argument("--phase", choices=["prefill", "decode"], default="decode")
    p.add_argument("--plan", required=True)
    p.add_argument("--variable", required=True)
    p.add_argument("--grid", default="", help="comma-separated values")
    p.add_argument("--kv-capacity", type=float, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("traffic", parents=[common], help="dataset fetch traffic")
    p.add_argument("--phase", choices=["prefill", "decode"], default="decode")
    p.add_argument("--plan", required=True)
    p.add_argument("--kv-capacity", type=float, default=None)
    p.set_defaults(func=cmd_traffic)

    p = sub.add_parser("cost", parents=[common], help="power/price report")
    p.add_argument("--components", required=True, help="JSON component list")
    p.add_argument("--throughput", type=float, required=True)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("dag", parents=[common], help="graph exports")
    p.add_argument("dag_command", choices=["export"])
    p.add_argument("--phase", choices=["prefill", "decode"], default="decode")
    p.add_argument("--plan", required=True)
    p.add_argument("--single-layer", action="store_true")
    p.add_argument("--json", action="store_true", help="also dump dag.json")
    p.set_defaults(func=cmd_dag)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnknownPreset, ModelSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoFeasibleB, EmptySearchSpace) as exc:
        print(f"no feasible plan: {exc}", file=sys.stderr)
        return EXIT_NO_PLAN


if __name__ == "__main__":
    sys.exit(main())
