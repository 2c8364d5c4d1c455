"""
Memory footprints and the largest feasible batch
================================================

The host must hold the whole model plus the KV cache of every accumulated
sequence; the GPU holds buffers and transients only.  The accumulated batch
is therefore bounded by host memory, and it shrinks as context grows.
"""
# %%

from moe_planner import (
    BatchingPlan,
    WorkloadSpec,
    a5000_like,
    check_constraints,
    max_feasible_B,
    preset,
)

model = preset("mixtral-8x7b")
hw = a5000_like(256_000_000_000)
print(f"model: {model.model_bytes / 1e9:.1f} GB, host: {hw.m_c / 1e9:.0f} GB, "
      f"GPU: {hw.m_g / 1e9:.0f} GB")

# %%
# Largest feasible accumulated batch across context lengths.

template = BatchingPlan(B=1, b_a=64, b_e=4096, omega=0.0,
                        s_expert=2 * model.expert_bytes, s_params=0)
print("\nprompt+decode  max feasible B")
for prompt, decode in ((256, 32), (512, 256), (2048, 1024), (8192, 4096)):
    wl = WorkloadSpec(prompt, decode, 1, "decode")
    B = max_feasible_B(model, hw, wl, template)
    print(f"{prompt:6d}+{decode:<5d}  {B:8d}")

# %%
# Footprint breakdown at the operating point.

wl = WorkloadSpec(512, 256, 1, "decode")
B = max_feasible_B(model, hw, wl, template)
plan = BatchingPlan(B, 64, 4096, 0.6, 2 * model.expert_bytes, 0)
fp = check_constraints(model, hw, wl, plan)
print(f"\nB = {B}")
print(f"host: KV {fp.s_kv_cpu / 1e9:.1f} GB + model {model.model_bytes / 1e9:.1f} GB "
      f"= {fp.host_total / 1e9:.1f} GB (feasible: {fp.host_feasible})")
print(f"gpu:  buffers+KV slice+transients = {fp.gpu_total / 1e9:.2f} GB "
      f"(feasible: {fp.gpu_feasible})")
