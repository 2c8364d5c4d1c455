"""Execution DAG for one offloaded MoE forward pass.

Nodes are compute or copy jobs pinned to one of four resources (GPU compute,
CPU compute, HtoD link, DtoH link); edges are data dependencies plus buffer
recycling constraints.  After ``serialize_resources`` adds submission-order
chains within each resource, the critical path of the graph equals the
makespan of a single-server-per-resource schedule, which is what the plan
search optimizes and the event simulator reproduces.

Buffer recycling edges mirror the engine's GPU allocations:

* expert prefetch: the k-th uncached expert's weight copy may start only
  after the (k - slots)-th uncached expert is consumed, where ``slots =
  s_expert // expert_bytes``;
* the single dense-module buffer: a layer's dense copy waits for the
  previous uncached dense layer's last consumer (its post-attention);
* KV prefetch ring: in-flight KV slices are bounded by the charged
  micro-batch slot plus whatever GPU memory the plan leaves spare, so the
  link may run ahead of the attention mechanisms without overrunning the
  device.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Sequence

from .hw_profile import HardwareProfile, LatencyTable, ModuleKind, latency_lookup
from .memory_model import (
    BatchingPlan,
    Phase,
    WorkloadSpec,
    cache_placement,
    check_constraints,
    kv_gpu_bytes,
    validate_plan,
)
from .model_catalog import ModelSpec


class InfeasiblePlan(ValueError):
    pass


class CyclicGraph(ValueError):
    pass


class CycleIntroduced(RuntimeError):
    """Resource serialization produced a cycle; the order policy is broken."""


class Resource(str, enum.Enum):
    GPU_COMPUTE = "gpu_compute"
    CPU_COMPUTE = "cpu_compute"
    HTOD_LINK = "htod_link"
    DTOH_LINK = "dtoh_link"


class NodeKind(str, enum.Enum):
    WEIGHT_COPY = "weight_copy"
    KV_COPY_IN = "kv_copy_in"
    KV_COPY_OUT = "kv_copy_out"
    PRE_ATTENTION = "pre_attention"
    ATTN_MECH_GPU = "attn_mech_gpu"
    ATTN_MECH_CPU = "attn_mech_cpu"
    POST_ATTENTION = "post_attention"
    ROUTER = "router"
    EXPERT_COMPUTE = "expert_compute"
    BARRIER = "barrier"  # synthetic entry/exit/layer-boundary, zero duration


KIND_RESOURCE: dict[NodeKind, Resource | None] = {
    NodeKind.WEIGHT_COPY: Resource.HTOD_LINK,
    NodeKind.KV_COPY_IN: Resource.HTOD_LINK,
    NodeKind.KV_COPY_OUT: Resource.DTOH_LINK,
    NodeKind.PRE_ATTENTION: Resource.GPU_COMPUTE,
    NodeKind.ATTN_MECH_GPU: Resource.GPU_COMPUTE,
    NodeKind.ATTN_MECH_CPU: Resource.CPU_COMPUTE,
    NodeKind.POST_ATTENTION: Resource.GPU_COMPUTE,
    NodeKind.ROUTER: Resource.GPU_COMPUTE,
    NodeKind.EXPERT_COMPUTE: Resource.GPU_COMPUTE,
    NodeKind.BARRIER: None,
}

@dataclass(frozen=True, slots=True)
class DagNode:
    """One job.  ``id`` doubles as the submission sequence number."""

    id: int
    kind: NodeKind
    resource: Resource | None
    duration: float
    label: str
    layer: int = -1
    tokens: int = 0  # query tokens of a compute job
    seqs: int = 0  # sequences of an attention job
    nbytes: float = 0.0  # payload of a copy job


@dataclass(frozen=True)
class Dag:
    nodes: tuple[DagNode, ...]
    edges: tuple[tuple[int, int], ...]
    entry_id: int
    exit_id: int

    def predecessors(self) -> list[list[int]]:
        preds: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            preds[v].append(u)
        return preds

    def successors(self) -> list[list[int]]:
        succs: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            succs[u].append(v)
        return succs


def topological_order(dag: Dag) -> list[int]:
    """Kahn's algorithm; raises CyclicGraph when no topological order exists."""
    indeg = [0] * len(dag.nodes)
    succs = dag.successors()
    for _, v in dag.edges:
        indeg[v] += 1
    ready = [i for i, d in enumerate(indeg) if d == 0]
    order: list[int] = []
    while ready:
        u = ready.pop()
        order.append(u)
        for v in succs[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    if len(order) != len(dag.nodes):
        raise CyclicGraph("graph contains a cycle")
    return order


def validate_dag(dag: Dag) -> None:
    """Acyclic, entry/exit are unique endpoints, and fully connected through
    them."""
    preds = dag.predecessors()
    succs = dag.successors()
    if preds[dag.entry_id]:
        raise ValueError("entry node has predecessors")
    if succs[dag.exit_id]:
        raise ValueError("exit node has successors")
    topological_order(dag)
    seen = {dag.entry_id}
    stack = [dag.entry_id]
    while stack:
        for v in succs[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != len(dag.nodes):
        raise ValueError("not every node is reachable from entry")
    seen = {dag.exit_id}
    stack = [dag.exit_id]
    while stack:
        for v in preds[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) != len(dag.nodes):
        raise ValueError("not every node reaches exit")


def even_split(total_tokens: int, buckets: int) -> list[int]:
    """Deterministic even distribution: floor share everywhere, remainder to
    the leading buckets.  Sums exactly to ``total_tokens``."""
    base, extra = divmod(total_tokens, buckets)
    return [base + (1 if i < extra else 0) for i in range(buckets)]


class _Builder:
    def __init__(self) -> None:
        self.nodes: list[DagNode] = []
        self.edges: list[tuple[int, int]] = []
        self._edge_set: set[tuple[int, int]] = set()

    def add(
        self,
        kind: NodeKind,
        duration: float,
        label: str,
        deps: Sequence[int] = (),
        layer: int = -1,
        tokens: int = 0,
        seqs: int = 0,
        nbytes: float = 0.0,
    ) -> int:
        nid = len(self.nodes)
        self.nodes.append(
            DagNode(
                id=nid,
                kind=kind,
                resource=KIND_RESOURCE[kind],
                duration=duration,
                label=label,
                layer=layer,
                tokens=tokens,
                seqs=seqs,
                nbytes=nbytes,
            )
        )
        for d in deps:
            self.connect(d, nid)
        return nid

    def connect(self, u: int, v: int) -> None:
        if (u, v) not in self._edge_set:
            self._edge_set.add((u, v))
            self.edges.append((u, v))


def _micro_batches(seqs: int, cap: int) -> list[int]:
    """Split ``seqs`` sequences into micro-batches of at most ``cap``."""
    out = []
    while seqs > 0:
        take = min(cap, seqs)
        out.append(take)
        seqs -= take
    return out


def _chunks(tokens: int, cap: int) -> list[int]:
    out = []
    while tokens > 0:
        take = min(cap, tokens)
        out.append(take)
        tokens -= take
    return out


def _build_graph(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    plan: BatchingPlan,
    phase: Phase,
    num_layers: int,
    layer_offset: int,
    expert_tokens: Sequence[Sequence[int]] | None,
) -> Dag:
    workload = workload.with_phase(phase)
    validate_plan(model, plan)
    footprint = check_constraints(model, hw, workload, plan)
    if not footprint.feasible:
        raise InfeasiblePlan(
            f"plan violates memory constraints (host_feasible="
            f"{footprint.host_feasible}, gpu_feasible={footprint.gpu_feasible})"
        )

    prefill = phase is Phase.PREFILL
    tif = workload.tokens_per_seq_in_flight
    context = workload.prompt_len if prefill else workload.max_context
    kv = model.kv_bytes_per_token_layer

    cpu_seqs = plan.cpu_sequences()
    gpu_seqs = plan.gpu_sequences()
    if cpu_seqs > 0 and hw.cpu_attn_flops == 0:
        has_cpu_table = any(
            t.module_kind is ModuleKind.ATTN_MECH_CPU for t in tables
        )
        if not has_cpu_table:
            raise InfeasiblePlan(
                "plan routes attention to the CPU but no CPU attention rate "
                "or latency table is available"
            )
    placement = cache_placement(model, plan.s_params)
    expert_slots = (
        plan.s_expert // model.expert_bytes if model.expert_bytes > 0 else 0
    )
    batch_tokens = plan.B * tif
    routed_tokens = batch_tokens * model.top_k

    # KV prefetch ring: the charged slot plus the plan's spare GPU bytes,
    # counted in full micro-batch slices
    kv_ring_slices = 0
    if not prefill and gpu_seqs > 0:
        slice_bytes = plan.b_a * context * kv
        ring_bytes = (hw.m_g - footprint.gpu_total) + kv_gpu_bytes(
            model, workload, plan
        )
        kv_ring_slices = max(1, int(ring_bytes // slice_bytes))

    def lat(kind: ModuleKind, tokens: int) -> float:
        return latency_lookup(tables, kind, tokens, context)

    b = _Builder()
    prev_boundary: int | None = None
    last_uncached_dense_post: int | None = None
    # (copy_node, free_node) per uncached expert fetch, in global fetch order
    expert_fetches: list[tuple[int, int]] = []
    # (kv_in_node, consuming mech) per KV micro-batch, in global order
    kv_stages: list[tuple[int, int]] = []

    for li in range(num_layers):
        layer = layer_offset + li
        layer_deps: list[int] = [prev_boundary] if prev_boundary is not None else []

        dense_copy: int | None = None
        if layer >= placement.dense_layers:
            # copies carry no data dependency on earlier layers; the link
            # chain added by serialize_resources orders them
            dense_copy = b.add(
                NodeKind.WEIGHT_COPY,
                model.dense_bytes_per_layer / hw.bw_htod,
                f"L{layer}/dense_copy",
                layer=layer,
                nbytes=float(model.dense_bytes_per_layer),
            )
            if last_uncached_dense_post is not None:
                # single dense buffer: wait for the previous occupant's last use
                b.connect(last_uncached_dense_post, dense_copy)

        compute_deps = list(layer_deps)
        if dense_copy is not None:
            compute_deps.append(dense_copy)

        mech_nodes: list[int] = []
        if cpu_seqs > 0:
            # issued first so the CPU kernel starts as early as possible
            pre_cpu = b.add(
                NodeKind.PRE_ATTENTION,
                lat(ModuleKind.PRE_ATTENTION, cpu_seqs * tif),
                f"L{layer}/pre_attn/cpu",
                deps=compute_deps,
                layer=layer,
                tokens=cpu_seqs * tif,
                seqs=cpu_seqs,
            )
            out_tokens = cpu_seqs * tif
            b.add(
                NodeKind.KV_COPY_OUT,
                out_tokens * kv / hw.bw_dtoh,
                f"L{layer}/kv_out/cpu",
                deps=(pre_cpu,),
                layer=layer,
                nbytes=float(out_tokens * kv),
            )
            mech_cpu = b.add(
                NodeKind.ATTN_MECH_CPU,
                lat(ModuleKind.ATTN_MECH_CPU, cpu_seqs * tif),
                f"L{layer}/attn_cpu",
                deps=(pre_cpu,),  # host KV is read in place
                layer=layer,
                tokens=cpu_seqs * tif,
                seqs=cpu_seqs,
            )
            mech_nodes.append(mech_cpu)

        for mb, mb_seqs in enumerate(_micro_batches(gpu_seqs, plan.b_a)):
            mb_tokens = mb_seqs * tif
            pre = b.add(
                NodeKind.PRE_ATTENTION,
                lat(ModuleKind.PRE_ATTENTION, mb_tokens),
                f"L{layer}/pre_attn/mb{mb}",
                deps=compute_deps,
                layer=layer,
                tokens=mb_tokens,
                seqs=mb_seqs,
            )
            mech_deps = [pre]
            kv_in: int | None = None
            if not prefill:
                kv_in = b.add(
                    NodeKind.KV_COPY_IN,
                    mb_seqs * context * kv / hw.bw_htod,
                    f"L{layer}/kv_in/mb{mb}",
                    layer=layer,
                    nbytes=float(mb_seqs * context * kv),
                )
                if len(kv_stages) >= kv_ring_slices:
                    # ring slot recycled from an earlier consumed slice
                    b.connect(kv_stages[-kv_ring_slices][1], kv_in)
                mech_deps.append(kv_in)
            out_tokens = mb_tokens
            b.add(
                NodeKind.KV_COPY_OUT,
                out_tokens * kv / hw.bw_dtoh,
                f"L{layer}/kv_out/mb{mb}",
                deps=(pre,),
                layer=layer,
                nbytes=float(out_tokens * kv),
            )
            mech = b.add(
                NodeKind.ATTN_MECH_GPU,
                lat(ModuleKind.ATTN_MECH_GPU, mb_tokens),
                f"L{layer}/attn_gpu/mb{mb}",
                deps=mech_deps,
                layer=layer,
                tokens=mb_tokens,
                seqs=mb_seqs,
            )
            mech_nodes.append(mech)
            if kv_in is not None:
                kv_stages.append((kv_in, mech))

        # concatenation barrier: every attention result feeds post-attention
        post = b.add(
            NodeKind.POST_ATTENTION,
            lat(ModuleKind.POST_ATTENTION, batch_tokens),
            f"L{layer}/post_attn",
            deps=mech_nodes if mech_nodes else compute_deps,
            layer=layer,
            tokens=batch_tokens,
            seqs=plan.B,
        )
        if dense_copy is not None:
            last_uncached_dense_post = post
        router = b.add(
            NodeKind.ROUTER,
            lat(ModuleKind.ROUTER, batch_tokens),
            f"L{layer}/router",
            deps=(post,),
            layer=layer,
            tokens=batch_tokens,
        )

        if expert_tokens is not None:
            counts = list(expert_tokens[li])
            if len(counts) != model.experts_per_layer:
                raise ValueError("expert_tokens row length != experts_per_layer")
        else:
            counts = even_split(routed_tokens, model.experts_per_layer)

        cached_here = placement.experts_per_layer[layer % model.num_layers]
        expert_computes: list[int] = []
        for e, e_tokens in enumerate(counts):
            copy: int | None = None
            if e >= cached_here:
                copy = b.add(
                    NodeKind.WEIGHT_COPY,
                    model.expert_bytes / hw.bw_htod,
                    f"L{layer}/expert{e}_copy",
                    layer=layer,
                    nbytes=float(model.expert_bytes),
                )
                if expert_slots > 0 and len(expert_fetches) >= expert_slots:
                    # buffer slot freed when an earlier expert is consumed
                    b.connect(expert_fetches[-expert_slots][1], copy)
            chunk_deps = [router] + ([copy] if copy is not None else [])
            last_consumer = router
            for j, chunk in enumerate(_chunks(e_tokens, plan.b_e)):
                node = b.add(
                    NodeKind.EXPERT_COMPUTE,
                    lat(ModuleKind.EXPERT, chunk),
                    f"L{layer}/expert{e}/chunk{j}",
                    deps=chunk_deps,
                    layer=layer,
                    tokens=chunk,
                )
                expert_computes.append(node)
                last_consumer = node
            if copy is not None:
                expert_fetches.append((copy, last_consumer))

        if li < num_layers - 1:
            prev_boundary = b.add(
                NodeKind.BARRIER,
                0.0,
                f"L{layer}/boundary",
                deps=expert_computes,
                layer=layer,
            )

    # synthetic entry and exit
    n_body = len(b.nodes)
    preds_count = [0] * n_body
    succs_count = [0] * n_body
    for u, v in b.edges:
        succs_count[u] += 1
        preds_count[v] += 1
    entry = b.add(NodeKind.BARRIER, 0.0, "entry")
    for i in range(n_body):
        if preds_count[i] == 0:
            b.connect(entry, i)
    exit_ = b.add(NodeKind.BARRIER, 0.0, "exit")
    for i in range(n_body):
        if succs_count[i] == 0:
            b.connect(i, exit_)

    dag = Dag(tuple(b.nodes), tuple(b.edges), entry, exit_)
    validate_dag(dag)
    return dag


def build_layer_dag(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    plan: BatchingPlan,
    phase: Phase | str | None = None,
    layer_index: int = 0,
    expert_tokens: Sequence[int] | None = None,
) -> Dag:
    """One layer's DAG with synthetic entry/exit, before resource
    serialization."""
    phase = Phase(phase) if phase is not None else workload.phase
    per_layer = [expert_tokens] if expert_tokens is not None else None
    return _build_graph(
        model, hw, tables, workload, plan, phase, 1, layer_index, per_layer
    )


def build_forward_dag(
    model: ModelSpec,
    hw: HardwareProfile,
    tables: Sequence[LatencyTable],
    workload: WorkloadSpec,
    plan: BatchingPlan,
    phase: Phase | str | None = None,
    expert_tokens: Sequence[Sequence[int]] | None = None,
) -> Dag:
    """All layers spliced at shared boundary barriers, then serialized.

    Copy nodes carry no cross-layer data dependency, so with the link chains
    in place the next layer's weight prefetch overlaps the current layer's
    compute.
    """
    phase = Phase(phase) if phase is not None else workload.phase
    dag = _build_graph(
        model, hw, tables, workload, plan, phase, model.num_layers, 0, expert_tokens
    )
    return serialize_resources(dag)


def serialize_resources(dag: Dag, order_policy: str = "submission") -> Dag:
    """Chain nodes sharing a resource in submission order.

    The default policy orders by node id, which is creation order: within a
    layer, dense weights, then per-micro-batch KV-in, then expert weights by
    index on the HtoD link; program order on GPU compute; micro-batch order
    on the DtoH link.  Raises CycleIntroduced if the result is cyclic (cannot
    happen with the default policy).
    """
    if order_policy != "submission":
        raise ValueError(f"unknown order policy {order_policy!r}")
    by_resource: dict[Resource, list[int]] = {}
    for node in dag.nodes:
        if node.resource is not None:
            by_resource.setdefault(node.resource, []).append(node.id)
    edge_set = set(dag.edges)
    new_edges = list(dag.edges)
    for ids in by_resource.values():
        ids.sort()
        for u, v in zip(ids, ids[1:]):
            if (u, v) not in edge_set:
                edge_set.add((u, v))
                new_edges.append((u, v))
    out = Dag(dag.nodes, tuple(new_edges), dag.entry_id, dag.exit_id)
    try:
        topological_order(out)
    except CyclicGraph as exc:
        raise CycleIntroduced(str(exc)) from exc
    return out


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

_DOT_SHAPES = {
    Resource.GPU_COMPUTE: "box",
    Resource.CPU_COMPUTE: "ellipse",
    Resource.HTOD_LINK: "parallelogram",
    Resource.DTOH_LINK: "trapezium",
    None: "point",
}


def export_dot(dag: Dag) -> str:
    """Graphviz DOT text; node shape encodes the resource, labels carry
    durations."""
    lines = ["digraph offload_dag {", "  rankdir=LR;"]
    for node in dag.nodes:
        shape = _DOT_SHAPES[node.resource]
        label = f"{node.label}\\n{node.duration:.3e}s".replace('"', r"\"")
        lines.append(f'  n{node.id} [shape={shape}, label="{label}"];')
    for u, v in dag.edges:
        lines.append(f"  n{u} -> n{v};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def dag_to_json(dag: Dag) -> str:
    doc = {
        "entry": dag.entry_id,
        "exit": dag.exit_id,
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "resource": n.resource.value if n.resource else None,
                "duration": n.duration,
                "label": n.label,
            }
            for n in dag.nodes
        ],
        "edges": [list(e) for e in dag.edges],
    }
    return json.dumps(doc, indent=2, sort_keys=True)
