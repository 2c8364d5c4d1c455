"""
Searching the batching strategy
===============================

Enumerates the decision grid (micro-batch sizes, CPU attention split, buffer
allocations), scores every candidate by the critical path of its forward
DAG, and compares the winner against the single-unified-batch baseline.
"""
# %%

import time

from moe_planner import (
    SearchSpace,
    WorkloadSpec,
    a5000_like,
    model_based_baseline,
    preset,
    search,
    synth_profile,
)

model = preset("mixtral-8x7b")
hw = a5000_like(256_000_000_000)
tables = synth_profile(hw, model)
workload = WorkloadSpec(prompt_len=512, decode_len=256, num_sequences=10_000,
                        phase="decode")

# %%
# Decode-phase search: B is pinned to the host maximum, the grid covers the
# remaining five variables.

space = SearchSpace(
    b_a_grid=(16, 64, 256),
    b_e_grid=(1024, 4096),
    omega_grid=tuple(round(0.1 * i, 1) for i in range(11)),
    s_expert_slots_grid=(2, 8, 32),
    s_params_fracs=(0.0, 0.5, 1.0),
)
started = time.monotonic()
best = search(model, hw, tables, workload, space, "decode")
elapsed = time.monotonic() - started
p = best.plan
print(f"searched plan ({elapsed:.1f}s): B={p.B} b_a={p.b_a} b_e={p.b_e} "
      f"omega={p.omega} s_expert={p.s_expert / 1e9:.2f}GB "
      f"s_params={p.s_params / 1e9:.2f}GB")
print(f"decode throughput: {best.throughput:.1f} tok/s "
      f"(forward {best.t_forward:.2f}s)")

# %%
# The model-based baseline propagates one unified batch through the whole
# forward pass; attention peak memory caps it far below the host limit.

base = model_based_baseline(model, hw, tables, workload, "decode")
print(f"\nbaseline: unified B={base.plan.B}, {base.throughput:.1f} tok/s")
print(f"module-based advantage: {best.throughput / base.throughput:.1f}x")
