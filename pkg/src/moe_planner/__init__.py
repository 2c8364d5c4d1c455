"""Planner and simulator for module-based batching in offloaded MoE inference.

The package models a single-GPU machine with host-memory offloading and
searches the batching decision vector (accumulated batch, per-module
micro-batches, CPU attention split, GPU buffer allocations) that maximizes
forward throughput, validating estimates against a discrete-event simulator.
"""

from .exec_sim import RoutingModel, SimReport, compare_with_estimate, sample_routing, simulate_plan
from .hw_profile import (
    Component,
    HardwareProfile,
    LatencyTable,
    ModuleKind,
    a5000_like,
    builtin_profile,
    expert_idle_fraction,
    ingest_profile,
    latency_lookup,
    saturation_batch,
    synth_profile,
    tiny_test_hw,
    zero_idle_expert_tokens,
)
from .memory_model import (
    BatchingPlan,
    MemoryFootprint,
    NoFeasibleB,
    Phase,
    WorkloadSpec,
    cache_placement,
    check_constraints,
    intermediate_bytes,
    kv_cpu_bytes,
    kv_gpu_bytes,
    max_feasible_B,
    validate_plan,
)
from .model_catalog import ModelSpec, UnknownPreset, load_model_spec, preset
from .offload_dag import (
    Dag,
    DagNode,
    NodeKind,
    Resource,
    build_forward_dag,
    build_layer_dag,
    dag_to_json,
    even_split,
    export_dot,
    serialize_resources,
)
from .plan_search import (
    EmptySearchSpace,
    PlanEvaluation,
    SearchSpace,
    critical_path,
    enumerate_candidates,
    evaluate_plan,
    model_based_baseline,
    node_finish_times,
    search,
)
from .traffic_cost import (
    CostReport,
    FullKvOffload,
    GpuKvCache,
    cost_report,
    crossover_sequences,
    dataset_traffic,
)

__version__ = "0.1.0"

__all__ = [
    "BatchingPlan",
    "Component",
    "CostReport",
    "Dag",
    "DagNode",
    "EmptySearchSpace",
    "FullKvOffload",
    "GpuKvCache",
    "HardwareProfile",
    "LatencyTable",
    "MemoryFootprint",
    "ModelSpec",
    "ModuleKind",
    "NoFeasibleB",
    "NodeKind",
    "Phase",
    "PlanEvaluation",
    "Resource",
    "RoutingModel",
    "SearchSpace",
    "SimReport",
    "UnknownPreset",
    "WorkloadSpec",
    "a5000_like",
    "builtin_profile",
    "cache_placement",
    "check_constraints",
    "compare_with_estimate",
    "cost_report",
    "critical_path",
    "crossover_sequences",
    "dag_to_json",
    "dataset_traffic",
    "enumerate_candidates",
    "evaluate_plan",
    "even_split",
    "expert_idle_fraction",
    "export_dot",
    "ingest_profile",
    "intermediate_bytes",
    "kv_cpu_bytes",
    "kv_gpu_bytes",
    "latency_lookup",
    "load_model_spec",
    "max_feasible_B",
    "model_based_baseline",
    "node_finish_times",
    "preset",
    "sample_routing",
    "saturation_batch",
    "search",
    "serialize_resources",
    "simulate_plan",
    "synth_profile",
    "tiny_test_hw",
    "validate_plan",
    "zero_idle_expert_tokens",
    "build_forward_dag",
    "build_layer_dag",
    "check_constraints",
]
