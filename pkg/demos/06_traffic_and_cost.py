"""
KV-cache policy traffic and the cost of throughput
==================================================

Pinning KV in GPU memory caps the batch, so completing a dataset takes many
more passes and each pass re-fetches every expert.  Full offloading trades
per-step KV copies for far fewer weight fetches; past a modest dataset size
it wins by an order of magnitude.  The same single-GPU configuration also
wins on power and price against a multi-GPU server.
"""
# %%

from moe_planner import (
    BatchingPlan,
    Component,
    FullKvOffload,
    GpuKvCache,
    WorkloadSpec,
    a5000_like,
    cost_report,
    crossover_sequences,
    dataset_traffic,
    preset,
)
from moe_planner.traffic_cost import kv_bytes_per_sequence

model = preset("mixtral-8x7b")
hw = a5000_like(256_000_000_000)
workload = WorkloadSpec(256, 32, 1, "decode")
kv_per_seq = kv_bytes_per_sequence(model, workload)
host_batch = (hw.m_c - model.model_bytes) // kv_per_seq
plan = BatchingPlan(int(host_batch), 64, 4096, 0.6,
                    2 * model.expert_bytes, 0)
cached = GpuKvCache(4_000_000_000)
print(f"full-offload batch {plan.B} vs GPU-cached batch "
      f"{cached.capacity_bytes // kv_per_seq}")

# %%
# Cumulative HtoD bytes over the dataset, both policies.

print("\nsequences   full-offload      gpu-cached     ratio")
n = plan.B
for _ in range(6):
    wl = WorkloadSpec(256, 32, n, "decode")
    full = dataset_traffic(model, hw, wl, FullKvOffload(), plan)
    pinned = dataset_traffic(model, hw, wl, cached, plan)
    print(f"{n:9d}  {full / 1e12:10.2f} TB  {pinned / 1e12:10.2f} TB  {pinned / full:8.1f}x")
    n *= 4

crossing = crossover_sequences(model, hw, workload, plan, cached)
print(f"\nfull offloading starts winning at {crossing} sequences")

# %%
# Server cost comparison at matched throughput: eight GPUs against one GPU
# plus cheap host memory.

eight = cost_report(
    [Component("8xNVIDIA-A5000", 1600, 20.0),
     Component("1xAMD-7453", 100, 1.2),
     Component("512GB Host", 80, 1.1)],
    throughput=140,
)
single = cost_report(
    [Component("1xNVIDIA-A5000", 200, 2.5),
     Component("1xAMD-7453", 100, 1.2),
     Component("512GB Host", 80, 1.1)],
    throughput=143,
)
print(f"8-GPU server : {eight.total_power_watts:.0f} W, {eight.total_price:.1f} K$")
print(f"1-GPU server : {single.total_power_watts:.0f} W, {single.total_price:.1f} K$")
print(f"budget share : {single.total_price / eight.total_price:.0%}")
