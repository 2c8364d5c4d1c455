"""Size functions and feasibility constraints for batching plans.

Host side: the full model plus the KV cache for all accumulated sequences
must fit in host memory.  GPU side: persistently cached parameters, the
expert prefetch buffer, one layer's dense-module buffer, the active
attention micro-batch's KV slice, and transient intermediate states must fit
in GPU memory.  Infeasibility is a result, never an error.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .hw_profile import HardwareProfile
from .model_catalog import ModelSpec


class Phase(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


class NoFeasibleB(RuntimeError):
    """Not even B = 1 satisfies the memory constraints."""


class InvalidPlan(ValueError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"invalid plan field {field!r}: {reason}")
        self.field = field


@dataclass(frozen=True)
class WorkloadSpec:
    """One offline-inference workload: fixed-length prompts and decodes."""

    prompt_len: int
    decode_len: int
    num_sequences: int
    phase: Phase = Phase.DECODE

    def __post_init__(self) -> None:
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if self.decode_len < 0:
            raise ValueError("decode_len must be >= 0")
        if self.num_sequences < 1:
            raise ValueError("num_sequences must be >= 1")
        object.__setattr__(self, "phase", Phase(self.phase))

    @property
    def max_context(self) -> int:
        return self.prompt_len + self.decode_len

    @property
    def tokens_per_seq_in_flight(self) -> int:
        """Tokens of each sequence inside one forward pass."""
        return self.prompt_len if self.phase is Phase.PREFILL else 1

    def with_phase(self, phase: Phase) -> "WorkloadSpec":
        return replace(self, phase=Phase(phase))


@dataclass(frozen=True)
class BatchingPlan:
    """The searched decision vector.

    B: accumulated batch (sequences) for the sparse MoE layer.
    b_a: GPU attention micro-batch (sequences).
    b_e: GPU expert micro-batch cap (tokens).
    omega: share of B whose attention mechanism runs on the CPU.
    s_expert: reserved GPU expert-buffer bytes.
    s_params: model-parameter bytes cached persistently in the GPU.
    """

    B: int
    b_a: int
    b_e: int
    omega: float
    s_expert: int
    s_params: int

    def cpu_sequences(self) -> int:
        return int(round(self.omega * self.B))

    def gpu_sequences(self) -> int:
        return self.B - self.cpu_sequences()


OMEGA_GRID_STEP = 0.1
MIN_EXPERT_BUFFER_SLOTS = 2  # prefetch double-buffering floor


def validate_plan(model: ModelSpec, plan: BatchingPlan) -> None:
    """Raise InvalidPlan if the plan violates a structural invariant."""
    if plan.B < 1:
        raise InvalidPlan("B", "must be >= 1")
    if plan.b_e < 1:
        raise InvalidPlan("b_e", "must be >= 1")
    if not 0.0 <= plan.omega <= 1.0:
        raise InvalidPlan("omega", "must be within [0, 1]")
    steps = plan.omega / OMEGA_GRID_STEP
    if abs(steps - round(steps)) > 1e-9:
        raise InvalidPlan("omega", "must be a multiple of 0.1")
    if plan.b_a < 1:
        raise InvalidPlan("b_a", "must be >= 1")
    if plan.omega < 1.0 and plan.b_a > math.ceil((1.0 - plan.omega) * plan.B):
        raise InvalidPlan(
            "b_a", "exceeds the GPU share ceil((1 - omega) * B) of the batch"
        )
    if plan.s_params < 0:
        raise InvalidPlan("s_params", "must be >= 0")
    if plan.s_params > model.model_bytes:
        raise InvalidPlan("s_params", "exceeds the model size")
    placement = cache_placement(model, plan.s_params)
    if placement.uncached_expert_count > 0:
        floor = MIN_EXPERT_BUFFER_SLOTS * model.expert_bytes
        if plan.s_expert < floor:
            raise InvalidPlan(
                "s_expert",
                f"below the double-buffering floor of {floor} bytes while "
                "uncached experts remain",
            )
    elif plan.s_expert < 0:
        raise InvalidPlan("s_expert", "must be >= 0")


@dataclass(frozen=True)
class CachePlacement:
    """Which whole modules the s_params budget pins in GPU memory.

    Dense modules of the leading layers are cached first (every token uses
    them), then routed experts round-robin across layers: the first
    ``experts_per_layer[l]`` expert indices of layer ``l`` are resident.
    """

    dense_layers: int
    experts_per_layer: tuple[int, ...]
    cached_bytes: int
    uncached_expert_count: int
    uncached_expert_bytes: int
    uncached_dense_bytes: int


def cache_placement(model: ModelSpec, s_params: int) -> CachePlacement:
    L, E = model.num_layers, model.experts_per_layer
    dense = model.dense_bytes_per_layer
    dense_layers = min(L, s_params // dense) if dense > 0 else L
    remaining = s_params - dense_layers * dense
    cached_experts_total = min(L * E, int(remaining // model.expert_bytes))
    base, extra = divmod(cached_experts_total, L)
    per_layer = tuple(base + (1 if l < extra else 0) for l in range(L))
    cached_bytes = dense_layers * dense + cached_experts_total * model.expert_bytes
    uncached_experts = L * E - cached_experts_total
    return CachePlacement(
        dense_layers=dense_layers,
        experts_per_layer=per_layer,
        cached_bytes=cached_bytes,
        uncached_expert_count=uncached_experts,
        uncached_expert_bytes=uncached_experts * model.expert_bytes,
        uncached_dense_bytes=(L - dense_layers) * dense,
    )


@dataclass(frozen=True)
class MemoryFootprint:
    s_kv_cpu: int
    s_kv_gpu: int
    s_is: int
    host_total: int
    gpu_total: int
    host_feasible: bool
    gpu_feasible: bool

    @property
    def feasible(self) -> bool:
        return self.host_feasible and self.gpu_feasible


def kv_cpu_bytes(model: ModelSpec, workload: WorkloadSpec, B: int) -> int:
    """Host KV bytes for B sequences, sized at maximum context up front."""
    if B < 1:
        raise ValueError("B must be >= 1")
    return B * workload.max_context * model.kv_bytes_per_token_layer * model.num_layers


def kv_gpu_bytes(model: ModelSpec, workload: WorkloadSpec, plan: BatchingPlan) -> int:
    """GPU-resident KV: one attention micro-batch of one layer during decode.

    Zero in prefill (freshly generated KV is part of the intermediate state
    until offloaded) and zero when all attention runs on the CPU.
    """
    if workload.phase is Phase.PREFILL:
        return 0
    if plan.omega >= 1.0:
        return 0
    return plan.b_a * workload.max_context * model.kv_bytes_per_token_layer


def intermediate_bytes(
    model: ModelSpec, workload: WorkloadSpec, plan: BatchingPlan
) -> int:
    """Transient execution state: accumulated hidden states plus the peak
    per-kernel activations of the attention and expert micro-batches."""
    tif = workload.tokens_per_seq_in_flight
    context = workload.prompt_len if workload.phase is Phase.PREFILL else workload.max_context
    hidden_residency = plan.B * tif * model.hidden_bytes_per_token
    attn_tokens = plan.b_a * tif
    attn_act = attn_tokens * model.attn_activation_per_token
    attn_ctx_act = plan.b_a * context * model.attn_activation_bytes_per_ctx_token
    expert_act = plan.b_e * model.expert_activation_per_token
    return int(hidden_residency + attn_act + attn_ctx_act + expert_act)


def check_constraints(
    model: ModelSpec,
    hw: HardwareProfile,
    workload: WorkloadSpec,
    plan: BatchingPlan,
) -> MemoryFootprint:
    """Evaluate both memory constraints; infeasibility is reported, not raised."""
    s_kv_cpu = kv_cpu_bytes(model, workload, plan.B)
    s_kv_gpu = kv_gpu_bytes(model, workload, plan)
    s_is = intermediate_bytes(model, workload, plan)
    host_total = s_kv_cpu + model.model_bytes
    gpu_total = (
        plan.s_params
        + plan.s_expert
        + model.dense_bytes_per_layer
        + s_kv_gpu
        + s_is
    )
    return MemoryFootprint(
        s_kv_cpu=s_kv_cpu,
        s_kv_gpu=s_kv_gpu,
        s_is=s_is,
        host_total=host_total,
        gpu_total=gpu_total,
        host_feasible=host_total <= hw.m_c,
        gpu_feasible=gpu_total <= hw.m_g,
    )


def max_feasible_B(
    model: ModelSpec,
    hw: HardwareProfile,
    workload: WorkloadSpec,
    plan_without_B: BatchingPlan,
) -> int:
    """Largest B for which both constraints hold, all other plan fields fixed.

    Feasibility is monotone in B, so a doubling scan plus binary search is
    exact.  The B carried by ``plan_without_B`` is ignored.
    """

    def feasible(B: int) -> bool:
        probe = replace(plan_without_B, B=B)
        return check_constraints(model, hw, workload, probe).feasible

    if not feasible(1):
        raise NoFeasibleB(
            "no batch size satisfies the host and GPU memory constraints"
        )
    hi = 1
    while feasible(hi * 2):
        hi *= 2
    lo = hi  # feasible; hi*2 is not
    hi = hi * 2 - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo
