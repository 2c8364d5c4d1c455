"""
Roofline latency tables and expert saturation
=============================================

Synthesizes per-module latency tables for an A5000-shaped workstation and
inspects when the expert module saturates GPU compute, and how many tokens
per expert are needed before compute fully hides the weight fetch over PCIe.
"""
# %%
# Build the frozen fixture: Mixtral-8x7B geometry on the A5000-like profile.

from moe_planner import (
    ModuleKind,
    a5000_like,
    expert_idle_fraction,
    latency_lookup,
    preset,
    saturation_batch,
    synth_profile,
    zero_idle_expert_tokens,
)

model = preset("mixtral-8x7b")
hw = a5000_like(256_000_000_000)
tables = synth_profile(hw, model)

# %%
# Achieved-FLOPs curve: small batches are overhead dominated, large batches
# approach peak.  The curve saturates around 2^10 tokens.

print("tokens  achieved/peak")
for exp in range(0, 15, 2):
    n = 2**exp
    lat = latency_lookup(tables, ModuleKind.EXPERT, n, 0)
    achieved = n * model.expert_flops_per_token / lat
    print(f"{n:6d}  {achieved / hw.gpu_peak_flops:12.3f}")

sat = saturation_batch(model, hw, tables, ModuleKind.EXPERT, 0, 0.99)
print(f"\n99% of peak reached at {sat} tokens (~2^{sat.bit_length() - 1})")

# %%
# Offloading view: one expert is 352.3 MB, an 11 ms fetch at 32 GB/s.  The
# batch must be large enough that computing one expert hides fetching the
# next; below that the GPU idles.

zero_idle = zero_idle_expert_tokens(model, hw, tables)
print(f"zero-idle expert batch: {zero_idle} tokens (~2^{zero_idle.bit_length() - 1})")
print("\ntokens  GPU idle share while fetching")
for n in (64, 256, 1024, zero_idle, 4096):
    print(f"{n:6d}  {expert_idle_fraction(model, hw, tables, n):12.3f}")
