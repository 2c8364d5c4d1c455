"""Batching-strategy search: critical-path estimation plus grid enumeration.

The objective is forward throughput, batch tokens divided by the critical
path of the serialized forward DAG.  Decode pins the accumulated batch to
the maximum the memories admit (host KV growth dominates); prefill searches
the batch as well because in-flight prompt tokens inflate the intermediate
state.  The model-based baseline is the same evaluator restricted to a
single unified batch with no accumulation and no CPU attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

from .hw_profile import HardwareProfile, LatencyTable
from .memory_model import (
    BatchingPlan,
    InvalidPlan,
    MemoryFootprint,
    MIN_EXPERT_BUFFER_SLOTS,
    NoFeasibleB,
    Phase,
    WorkloadSpec,
    check_constraints,
    max_feasible_B,
    validate_plan,
)
from .model_catalog import ModelSpec
from .offload_dag import (
    Dag,
    InfeasiblePlan,
    build_forward_dag,
    topological_order,
)


class EmptySearchSpace(RuntimeError):
    """No feasible candidate exists in the given search space."""


def node_finish_times(dag: Dag) -> list[float]:
    """Earliest finish time per node: dp[v] = max over predecessors + cost."""
    order = topological_order(dag)
    preds = dag.predecessors()
    dp = [0.0] * len(dag.nodes)
    for v in order:
        earliest = 0.0
        for u in preds[v]:
            if dp[u] > earliest:
                earliest = dp[u]
        dp[v] = earliest + dag.nodes[v].duration
    return dp


def critical_path(dag: Dag) -> float:
    """Makespan of the DAG under the serialized schedule (dp at the exit)."""
    return node_finish_times(dag)[dag.exit_id]


def tokens_per_forward(workload: WorkloadSpec, B: int) -> int:
    """Tokens credited to one forward pass: the whole prompt in prefill, one
    token per sequence in decode."""
    return B * (workload.prompt_len if workload.phase is Phase.PREFILL else 1)


@dataclass(frozen=True)
class PlanEvaluation:
    plan: BatchingPlan
    phase: Phase
    t_forward: float
    throughput: float
    footprint: MemoryFootprint
    feasible: bool = True

    def sort_key(self) -> tuple:
        p = self.plan
        return (-self.throughput, p.B, p.b_a, p.b_e, p.omega, p.s_expert, p.s_params)


def evaluate_plan(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    plan: BatchingPlan,
    phase: Phase | str | None = None,
) -> PlanEvaluation:
    """Build the forward DAG and score the plan.

    Plans that violate the memory constraints (or a structural invariant)
    come back marked infeasible with throughput 0 rather than raising.
    """
    wl = workload.with_phase(Phase(phase)) if phase is not None else workload
    footprint = check_constraints(model, hw, wl, plan)
    if not footprint.feasible:
        return PlanEvaluation(plan, wl.phase, math.inf, 0.0, footprint, False)
    try:
        dag = build_forward_dag(model, hw, tables, wl, plan)
    except (InvalidPlan, InfeasiblePlan):
        return PlanEvaluation(plan, wl.phase, math.inf, 0.0, footprint, False)
    t_forward = critical_path(dag)
    throughput = tokens_per_forward(wl, plan.B) / t_forward
    return PlanEvaluation(plan, wl.phase, t_forward, throughput, footprint)


# ---------------------------------------------------------------------------
# Search space
# ---------------------------------------------------------------------------

def _powers_of_two(lo: int, hi: int) -> tuple[int, ...]:
    out = []
    v = 1
    while v <= hi:
        if v >= lo:
            out.append(v)
        v *= 2
    return tuple(out)


@dataclass(frozen=True)
class SearchSpace:
    """Grids for the five searched variables (plus the prefill batch).

    ``s_expert_slots_grid`` counts expert-sized buffer slots;
    ``s_params_fracs`` are fractions of the GPU bytes left after everything
    else of a candidate is placed.  ``prefill_B_grid`` of None means powers
    of two up to the feasibility limit.
    """

    b_a_grid: tuple[int, ...] = (16, 64, 256, 1024)
    b_e_grid: tuple[int, ...] = (256, 1024, 4096, 16384)
    omega_grid: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    s_expert_slots_grid: tuple[int, ...] = (2, 4, 8, 32)
    s_params_fracs: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    prefill_B_grid: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        grids = {
            "b_a_grid": self.b_a_grid,
            "b_e_grid": self.b_e_grid,
            "omega_grid": self.omega_grid,
            "s_expert_slots_grid": self.s_expert_slots_grid,
            "s_params_fracs": self.s_params_fracs,
        }
        if self.prefill_B_grid is not None:
            grids["prefill_B_grid"] = self.prefill_B_grid
        for name, grid in grids.items():
            if len(grid) == 0:
                raise ValueError(f"{name} must be non-empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{name} must be strictly ascending")

    @classmethod
    def default(cls) -> "SearchSpace":
        """Desk-scale default.  The micro-batch grids subsample the full
        power-of-two ranges with a stride of 4 to keep full searches fast;
        pass explicit grids for finer resolution."""
        return cls()


def enumerate_candidates(
    model: ModelSpec,
    hw: HardwareProfile,
    workload: WorkloadSpec,
    space: SearchSpace,
    phase: Phase | str | None = None,
    skip_counts: dict[str, int] | None = None,
) -> Iterator[BatchingPlan]:
    """Yield every feasible plan of the grid product.

    Decode fixes B to the largest feasible value given the other fields;
    prefill draws B from its own power-of-two grid.  Infeasible combinations
    are skipped and tallied into ``skip_counts`` by reason.  Raises
    EmptySearchSpace on exhaustion if nothing was feasible.
    """
    wl = workload.with_phase(Phase(phase)) if phase is not None else workload
    skips = skip_counts if skip_counts is not None else {}

    def skip(reason: str) -> None:
        skips[reason] = skips.get(reason, 0) + 1

    yielded = 0
    for omega in space.omega_grid:
        if omega > 0 and hw.cpu_attn_flops == 0:
            skip("cpu_unavailable")
            continue
        for b_a in space.b_a_grid:
            for b_e in space.b_e_grid:
                for slots in space.s_expert_slots_grid:
                    s_expert = slots * model.expert_bytes
                    template = BatchingPlan(
                        B=1, b_a=b_a, b_e=b_e, omega=omega,
                        s_expert=s_expert, s_params=0,
                    )
                    try:
                        b_max = max_feasible_B(model, hw, wl, template)
                    except NoFeasibleB:
                        skip("no_feasible_B")
                        continue
                    if wl.phase is Phase.DECODE:
                        b_grid: Sequence[int] = (b_max,)
                    elif space.prefill_B_grid is not None:
                        b_grid = [x for x in space.prefill_B_grid if x <= b_max]
                        if not b_grid:
                            skip("no_feasible_B")
                    else:
                        b_grid = _powers_of_two(1, b_max)
                    for B in b_grid:
                        if omega < 1.0 and b_a > math.ceil((1.0 - omega) * B):
                            skip("b_a_exceeds_gpu_share")
                            continue
                        base = replace(template, B=B)
                        footprint = check_constraints(model, hw, wl, base)
                        if not footprint.feasible:
                            skip("infeasible")
                            continue
                        spare = hw.m_g - footprint.gpu_total
                        for frac in space.s_params_fracs:
                            s_params = min(
                                model.model_bytes, int(frac * spare)
                            )
                            plan = replace(base, s_params=s_params)
                            try:
                                validate_plan(model, plan)
                            except InvalidPlan:
                                skip("invalid_plan")
                                continue
                            if not check_constraints(model, hw, wl, plan).feasible:
                                skip("infeasible")
                                continue
                            yielded += 1
                            yield plan
    if yielded == 0:
        raise EmptySearchSpace(
            f"no feasible candidate in the search space (skips: {skips})"
        )


def search(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    space: SearchSpace,
    phase: Phase | str | None = None,
) -> PlanEvaluation:
    """Highest-throughput feasible plan; ties break toward the
    lexicographically smallest (B, b_a, b_e, omega, s_expert, s_params)."""
    wl = workload.with_phase(Phase(phase)) if phase is not None else workload
    best: PlanEvaluation | None = None
    for plan in enumerate_candidates(model, hw, wl, space, wl.phase):
        ev = evaluate_plan(model, hw, tables, wl, plan)
        if not ev.feasible:
            continue
        if best is None or ev.sort_key() < best.sort_key():
            best = ev
    if best is None:
        raise EmptySearchSpace("every candidate evaluated infeasible")
    return best


def model_based_baseline(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    phase: Phase | str | None = None,
    s_params_fracs: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
) -> PlanEvaluation:
    """Best plan under model-based batching: one unified batch size.

    The restriction is B = b_a (the whole batch moves through every module
    together), no CPU attention, and each expert runs its routed share as a
    single kernel.  Because the same batch is prefetched once and then
    decoded, B must satisfy the memory constraints of both phases; attention
    peak memory with the full B in flight is what caps it.
    """
    wl = workload.with_phase(Phase(phase)) if phase is not None else workload
    s_expert = MIN_EXPERT_BUFFER_SLOTS * model.expert_bytes
    phases = [wl.with_phase(Phase.PREFILL)]
    if workload.decode_len > 0:
        phases.append(wl.with_phase(Phase.DECODE))

    def unified_feasible(plan: BatchingPlan) -> bool:
        return all(check_constraints(model, hw, w, plan).feasible for w in phases)

    best: PlanEvaluation | None = None
    B = 1
    while True:
        plan0 = BatchingPlan(
            B=B, b_a=B, b_e=B * model.top_k, omega=0.0,
            s_expert=s_expert, s_params=0,
        )
        if not unified_feasible(plan0):
            break
        spare = min(
            hw.m_g - check_constraints(model, hw, w, plan0).gpu_total
            for w in phases
        )
        for frac in s_params_fracs:
            plan = replace(
                plan0, s_params=min(model.model_bytes, int(frac * spare))
            )
            if not unified_feasible(plan):
                continue
            ev = evaluate_plan(model, hw, tables, wl, plan)
            if ev.feasible and (best is None or ev.sort_key() < best.sort_key()):
                best = ev
        B *= 2
    if best is None:
        raise EmptySearchSpace("no unified batch size fits in memory")
    return best
