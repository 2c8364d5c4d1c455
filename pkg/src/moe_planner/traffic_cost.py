"""Analytical side models: dataset fetch traffic under KV policies, and the
power/price comparison of server configurations.

Fully offloading the KV cache admits the largest accumulated batch, so the
per-layer weight fetch amortizes over far more sequences; pinning KV in GPU
memory shrinks the batch and multiplies the number of dataset passes.  The
traffic metric is cumulative HtoD bytes to complete the dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

from .hw_profile import Component, HardwareProfile
from .memory_model import BatchingPlan, WorkloadSpec, cache_placement
from .model_catalog import ModelSpec


class InfeasiblePolicy(ValueError):
    """The GPU KV carve-out cannot hold even one sequence."""


@dataclass(frozen=True)
class FullKvOffload:
    """All KV lives in host memory; every decode step copies the GPU share in."""


@dataclass(frozen=True)
class GpuKvCache:
    """A fixed GPU carve-out pins KV for as many sequences as fit."""

    capacity_bytes: int

    def __post_init__(self) -> None:
        if self.capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")


TrafficPolicy = Union[FullKvOffload, GpuKvCache]


def kv_bytes_per_sequence(model: ModelSpec, workload: WorkloadSpec) -> int:
    return workload.max_context * model.kv_bytes_per_token_layer * model.num_layers


def per_forward_weight_bytes(model: ModelSpec, s_params: int) -> int:
    """HtoD weight bytes of one forward pass: every uncached module once."""
    placement = cache_placement(model, s_params)
    return placement.uncached_dense_bytes + placement.uncached_expert_bytes


def dataset_traffic(
    model: ModelSpec,
    hw: HardwareProfile,
    workload: WorkloadSpec,
    policy: TrafficPolicy,
    plan: BatchingPlan,
) -> int:
    """Total HtoD bytes to complete the dataset under the given KV policy.

    A pass prefills one batch and decodes it to completion (decode_len + 1
    forward passes).  Partial final batches are charged as full passes,
    matching padded fixed-length execution.
    """
    per_seq_kv = kv_bytes_per_sequence(model, workload)
    weight_pf = per_forward_weight_bytes(model, plan.s_params)
    forwards = workload.decode_len + 1
    n = workload.num_sequences

    if isinstance(policy, GpuKvCache):
        if policy.capacity_bytes < per_seq_kv:
            raise InfeasiblePolicy(
                f"KV carve-out of {policy.capacity_bytes} B holds no sequence "
                f"({per_seq_kv} B each)"
            )
        batch = min(plan.B, policy.capacity_bytes // per_seq_kv)
        passes = math.ceil(n / batch)
        # KV never leaves the GPU for the cached (entire) batch
        return passes * forwards * weight_pf

    # full offload: batch is host-bound; each decode step copies the GPU
    # share's KV in, reduced by the CPU attention split
    host_kv_budget = hw.m_c - model.model_bytes
    batch = min(plan.B, host_kv_budget // per_seq_kv) if per_seq_kv > 0 else plan.B
    if batch < 1:
        raise InfeasiblePolicy("host memory cannot hold the model plus any KV")
    passes = math.ceil(n / batch)
    gpu_share = batch - int(round(plan.omega * batch))
    kv_in_per_step = gpu_share * per_seq_kv
    return passes * (forwards * weight_pf + workload.decode_len * kv_in_per_step)


def traffic_rows(
    model: ModelSpec,
    hw: HardwareProfile,
    workload: WorkloadSpec,
    plan: BatchingPlan,
    policies: Sequence[tuple[str, TrafficPolicy]],
    num_sequences_grid: Sequence[int],
) -> list[tuple[int, str, int]]:
    """(num_sequences, policy, bytes) rows for plotting."""
    rows = []
    for n in num_sequences_grid:
        wl = WorkloadSpec(
            prompt_len=workload.prompt_len,
            decode_len=workload.decode_len,
            num_sequences=n,
            phase=workload.phase,
        )
        for name, policy in policies:
            rows.append((n, name, dataset_traffic(model, hw, wl, policy, plan)))
    return rows


def crossover_sequences(
    model: ModelSpec,
    hw: HardwareProfile,
    workload: WorkloadSpec,
    plan: BatchingPlan,
    cached_policy: GpuKvCache,
    limit: int = 2**24,
) -> int | None:
    """Smallest dataset size on a doubling grid where full offload fetches
    less than the GPU-cached policy; None if it never crosses."""
    n = 1
    while n <= limit:
        wl = WorkloadSpec(workload.prompt_len, workload.decode_len, n, workload.phase)
        full = dataset_traffic(model, hw, wl, FullKvOffload(), plan)
        cached = dataset_traffic(model, hw, wl, cached_policy, plan)
        if full < cached:
            return n
        n *= 2
    return None


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    total_power_watts: float
    total_price: float
    throughput: float
    tokens_per_joule: float
    tokens_per_price_unit: float


def cost_report(components: Sequence[Component], throughput: float) -> CostReport:
    """Sum static component power and price; relate them to throughput."""
    if not components:
        raise ValueError("component list must be non-empty")
    power = sum(c.power_watts for c in components)
    price = sum(c.price for c in components)
    return CostReport(
        total_power_watts=power,
        total_price=price,
        throughput=throughput,
        tokens_per_joule=throughput / power,
        tokens_per_price_unit=throughput / price,
    )
