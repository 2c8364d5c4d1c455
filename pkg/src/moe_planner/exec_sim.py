"""Discrete-event execution of a batching plan.

Four single-server resources (GPU compute, CPU compute, HtoD, DtoH) process
jobs in strict submission order with head-of-line blocking, matching the
resource chains the planner's critical-path estimate assumes.  Under even
routing the simulated makespan therefore reproduces the estimate; sampled
routing demonstrates how skew perturbs it.

Token routing is either the deterministic even split or a seeded
Dirichlet-multinomial draw per layer, so skew can be dialed via the
concentration parameter.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import IO, Any, Sequence

import numpy as np

from .hw_profile import HardwareProfile, LatencyTable
from .memory_model import (
    BatchingPlan,
    Phase,
    WorkloadSpec,
)
from .model_catalog import ModelSpec
from .offload_dag import (
    NodeKind,
    Resource,
    _build_graph,
    build_forward_dag,
    even_split,
)
from .plan_search import critical_path


@dataclass(frozen=True)
class RoutingModel:
    """How routed token counts per expert are produced.

    ``even`` ignores the seed; ``sampled`` draws expert probabilities from a
    symmetric Dirichlet (small concentration = heavy skew) and token counts
    from the resulting multinomial, deterministically per (seed, layer).
    """

    mode: str = "even"
    concentration: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("even", "sampled"):
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")


def sample_routing(
    model: ModelSpec,
    tokens: int,
    routing: RoutingModel,
    layer_index: int,
) -> list[int]:
    """Per-expert token counts for one MoE layer; sums to tokens * top_k.

    ``tokens`` is the number of tokens entering the layer (B sequences in
    decode, B * prompt_len in prefill).
    """
    if tokens < 1:
        raise ValueError("tokens must be >= 1")
    total = tokens * model.top_k
    if routing.mode == "even":
        return even_split(total, model.experts_per_layer)
    rng = np.random.default_rng([routing.seed, layer_index])
    probs = rng.dirichlet(
        np.full(model.experts_per_layer, routing.concentration)
    )
    return [int(c) for c in rng.multinomial(total, probs)]


@dataclass(frozen=True)
class SimReport:
    makespan: float
    busy: dict[str, float]
    idle_fraction: dict[str, float]
    bytes_htod: float
    bytes_dtoh: float
    peak_gpu_bytes: float
    expert_tokens: tuple[tuple[int, ...], ...]
    mean_tokens_per_expert: float
    throughput: float
    oom_flag: bool

    def to_json(self) -> str:
        doc = {
            "makespan": self.makespan,
            "busy": self.busy,
            "idle_fraction": self.idle_fraction,
            "bytes_htod": self.bytes_htod,
            "bytes_dtoh": self.bytes_dtoh,
            "peak_gpu_bytes": self.peak_gpu_bytes,
            "expert_tokens": [list(r) for r in self.expert_tokens],
            "mean_tokens_per_expert": self.mean_tokens_per_expert,
            "throughput": self.throughput,
            "oom_flag": self.oom_flag,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


@dataclass
class _Trace:
    events: list[tuple[float, int, int, dict[str, Any]]] = field(default_factory=list)
    # (time, node_id, order: 0 start / 1 finish, record)

    def record(self, time: float, node, action: str) -> None:
        self.events.append(
            (
                time,
                node.id,
                0 if action == "start" else 1,
                {
                    "time": time,
                    "node": node.id,
                    "kind": node.kind.value,
                    "resource": node.resource.value if node.resource else None,
                    "action": action,
                },
            )
        )

    def write(self, stream: IO[str]) -> None:
        for _, _, _, record in sorted(self.events, key=lambda e: (e[0], e[1], e[2])):
            stream.write(json.dumps(record, sort_keys=True) + "\n")


def _gpu_activation_bytes(model: ModelSpec, workload: WorkloadSpec, node) -> float:
    """Transient GPU bytes of a running job beyond the static reservations.

    Only the attention mechanism and expert kernels are charged; hidden
    states of the other stages live inside the accumulated-batch residency
    that the footprint already counts.
    """
    context = (
        workload.prompt_len
        if workload.phase is Phase.PREFILL
        else workload.max_context
    )
    if node.kind is NodeKind.ATTN_MECH_GPU:
        return (
            node.tokens * model.attn_activation_per_token
            + node.seqs * context * model.attn_activation_bytes_per_ctx_token
        )
    if node.kind is NodeKind.EXPERT_COMPUTE:
        return node.tokens * model.expert_activation_per_token
    return 0.0


def simulate_plan(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    plan: BatchingPlan,
    routing: RoutingModel = RoutingModel(),
    phase: Phase | str | None = None,
    trace_stream: IO[str] | None = None,
) -> SimReport:
    """Event-driven execution over the four resources.

    Jobs come from the same construction rules as the planning DAG, with
    per-expert token counts supplied by the routing model; groups larger
    than b_e split into extra micro-batches instead of failing.  GPU
    occupancy is tracked throughout and overruns set ``oom_flag`` rather
    than raising.
    """
    wl = workload.with_phase(Phase(phase)) if phase is not None else workload
    batch_tokens = plan.B * wl.tokens_per_seq_in_flight
    counts: list[list[int]] = [
        sample_routing(model, batch_tokens, routing, layer)
        for layer in range(model.num_layers)
    ]
    dag = _build_graph(
        model, hw, tables, wl, plan, wl.phase, model.num_layers, 0, counts
    )
    preds = dag.predecessors()
    succs = dag.successors()
    n = len(dag.nodes)

    # static GPU reservations: cached params, expert buffer, dense buffer,
    # and the accumulated batch's hidden states; KV slices and kernel
    # activations are tracked dynamically while in flight
    static_bytes = float(
        plan.s_params
        + plan.s_expert
        + model.dense_bytes_per_layer
        + plan.B * wl.tokens_per_seq_in_flight * model.hidden_bytes_per_token
    )

    trace = _Trace() if trace_stream is not None else None

    pending = [len(preds[v]) for v in range(n)]
    queues: dict[Resource, list[int]] = {r: [] for r in Resource}
    for node in dag.nodes:
        if node.resource is not None:
            queues[node.resource].append(node.id)
    # a KV slice occupies its staging space from copy start until the
    # attention mechanism consuming it completes
    kv_consumer: dict[int, int] = {}
    kv_release: dict[int, float] = {}
    for node in dag.nodes:
        if node.kind is NodeKind.KV_COPY_IN:
            for s in succs[node.id]:
                if dag.nodes[s].kind is NodeKind.ATTN_MECH_GPU:
                    kv_consumer[node.id] = s
                    kv_release[s] = kv_release.get(s, 0.0) + node.nbytes
                    break
    heads = {r: 0 for r in Resource}
    server_free = {r: 0.0 for r in Resource}
    busy = {r: 0.0 for r in Resource}
    ready_time = [0.0] * n
    is_ready = [False] * n
    finished = [False] * n

    events: list[tuple[float, int, int]] = []  # (time, node_id, tiebreak)
    bytes_htod = 0.0
    bytes_dtoh = 0.0
    # occupancy deltas (time, order, bytes): releases sort before acquires
    # at equal timestamps, matching buffer-recycling semantics
    occupancy_deltas: list[tuple[float, int, float]] = []

    def dispatch(resource: Resource) -> None:
        nonlocal bytes_htod, bytes_dtoh
        queue = queues[resource]
        while heads[resource] < len(queue):
            nid = queue[heads[resource]]
            if not is_ready[nid]:
                return  # head-of-line blocking preserves submission order
            node = dag.nodes[nid]
            start = max(ready_time[nid], server_free[resource])
            finish = start + node.duration
            server_free[resource] = finish
            busy[resource] += node.duration
            heads[resource] += 1
            if resource is Resource.HTOD_LINK:
                bytes_htod += node.nbytes
                if node.kind is NodeKind.KV_COPY_IN and nid in kv_consumer:
                    occupancy_deltas.append((start, 1, node.nbytes))
            elif resource is Resource.DTOH_LINK:
                bytes_dtoh += node.nbytes
            if resource is Resource.GPU_COMPUTE:
                act = _gpu_activation_bytes(model, wl, node)
                if act:
                    occupancy_deltas.append((start, 1, act))
                    occupancy_deltas.append((finish, 0, -act))
                if nid in kv_release:
                    occupancy_deltas.append((finish, 0, -kv_release[nid]))
            if trace is not None:
                trace.record(start, node, "start")
            heapq.heappush(events, (finish, nid, 0))

    def mark_ready(nid: int, time: float) -> list[int]:
        """Node became runnable; barriers complete instantly."""
        completed = []
        stack = [(nid, time)]
        while stack:
            v, t = stack.pop()
            node = dag.nodes[v]
            if node.resource is None:
                finished[v] = True
                if trace is not None:
                    trace.record(t, node, "start")
                    trace.record(t, node, "finish")
                for w in succs[v]:
                    pending[w] -= 1
                    if pending[w] == 0:
                        ready_time[w] = max(ready_time[w], t)
                        stack.append((w, ready_time[w]))
            else:
                ready_time[v] = max(ready_time[v], t)
                is_ready[v] = True
                completed.append(v)
        return completed

    touched: set[Resource] = set()
    for v in range(n):
        if pending[v] == 0:
            for nid in mark_ready(v, 0.0):
                touched.add(dag.nodes[nid].resource)
    for r in touched:
        dispatch(r)

    makespan = 0.0
    while events:
        time, nid, _ = heapq.heappop(events)
        makespan = max(makespan, time)
        node = dag.nodes[nid]
        finished[nid] = True
        if trace is not None:
            trace.record(time, node, "finish")
        touched = {node.resource} if node.resource else set()
        for w in succs[nid]:
            pending[w] -= 1
            if pending[w] == 0:
                ready_time[w] = max(ready_time[w], time)
                for rid in mark_ready(w, ready_time[w]):
                    touched.add(dag.nodes[rid].resource)
        for r in touched:
            if r is not None:
                dispatch(r)

    if not all(finished):
        raise RuntimeError("simulation deadlocked; graph or queues inconsistent")

    peak = static_bytes
    level = static_bytes
    for _, _, delta in sorted(occupancy_deltas):
        level += delta
        peak = max(peak, level)

    if trace is not None:
        trace.write(trace_stream)

    throughput = batch_tokens / makespan if makespan > 0 else math.inf
    busy_out = {r.value: busy[r] for r in Resource}
    idle_out = {
        r.value: (1.0 - busy[r] / makespan) if makespan > 0 else 0.0
        for r in Resource
    }
    flat = [c for row in counts for c in row]
    return SimReport(
        makespan=makespan,
        busy=busy_out,
        idle_fraction=idle_out,
        bytes_htod=bytes_htod,
        bytes_dtoh=bytes_dtoh,
        peak_gpu_bytes=peak,
        expert_tokens=tuple(tuple(row) for row in counts),
        mean_tokens_per_expert=sum(flat) / len(flat),
        throughput=throughput,
        oom_flag=peak > hw.m_g,
    )


def compare_with_estimate(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    plan: BatchingPlan,
    phase: Phase | str | None = None,
) -> float:
    """Relative gap between the even-routing simulation and the critical-path
    estimate: |sim - dp| / dp."""
    wl = workload.with_phase(Phase(phase)) if phase is not None else workload
    estimate = critical_path(build_forward_dag(model, hw, tables, wl, plan))
    sim = simulate_plan(model, hw, tables, wl, plan, RoutingModel(mode="even"))
    return abs(sim.makespan - estimate) / estimate
