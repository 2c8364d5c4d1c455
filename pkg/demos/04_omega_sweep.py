"""
CPU attention split ratio
=========================

Sweeping the share of the batch whose attention mechanism runs on the CPU.
On a memory-bound Mixtral fixture the curve rises (every CPU sequence saves
an HtoD KV copy) until the CPU becomes the barrier, then falls: an interior
optimum.  On a DeepSeek-like model the latent KV must be up-projected inside
the mechanism, which is hopeless on the CPU, so the best split is zero.
"""
# %%

from dataclasses import replace

from moe_planner import (
    BatchingPlan,
    WorkloadSpec,
    a5000_like,
    evaluate_plan,
    max_feasible_B,
    preset,
    synth_profile,
)


def sweep(model, hw, workload, plan):
    curve = []
    for i in range(11):
        omega = round(0.1 * i, 1)
        ev = evaluate_plan(model, hw, synth_profile(hw, model), workload,
                           replace(plan, omega=omega))
        curve.append((omega, ev.throughput))
    return curve


def show(curve):
    top = max(t for _, t in curve)
    for omega, tput in curve:
        bar = "#" * int(40 * tput / top)
        print(f"omega={omega:.1f}  {tput:8.1f} tok/s  {bar}")


# %%
# Mixtral-8x7B, decode at context 768: memory-bound, interior peak.

model = preset("mixtral-8x7b")
hw = a5000_like(256_000_000_000)
wl = WorkloadSpec(512, 256, 10_000, "decode")
template = BatchingPlan(1, 64, 4096, 0.0, 2 * model.expert_bytes, 0)
plan = replace(template, B=max_feasible_B(model, hw, wl, template))
print(f"Mixtral-8x7B, B={plan.B}")
show(sweep(model, hw, wl, plan))

# %%
# DeepSeek-V2-like: the up-projection FLOPs swamp the CPU, best split is 0.

model = preset("deepseek-v2-like")
hw = a5000_like(512_000_000_000)
template = BatchingPlan(1, 16, 4096, 0.0, 8 * model.expert_bytes, 0)
plan = replace(template, B=max_feasible_B(model, hw, wl, template))
print(f"\nDeepSeek-V2-like, B={plan.B}")
curve = sweep(model, hw, wl, plan)
show(curve[:4] + curve[-1:])
