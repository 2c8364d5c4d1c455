import pytest

from moe_planner.hw_profile import Component
from moe_planner.memory_model import BatchingPlan, Phase, WorkloadSpec
from moe_planner.model_catalog import preset
from moe_planner.traffic_cost import (
    FullKvOffload,
    GpuKvCache,
    InfeasiblePolicy,
    cost_report,
    crossover_sequences,
    dataset_traffic,
    kv_bytes_per_sequence,
    per_forward_weight_bytes,
    traffic_rows,
)


def fig4_setup():
    model = preset("mixtral-8x7b")
    from moe_planner.hw_profile import a5000_like

    hw = a5000_like(256_000_000_000)
    workload = WorkloadSpec(prompt_len=256, decode_len=32, num_sequences=4096,
                            phase=Phase.DECODE)
    kv_per_seq = kv_bytes_per_sequence(model, workload)
    host_batch = (hw.m_c - model.model_bytes) // kv_per_seq
    plan = BatchingPlan(B=host_batch, b_a=64, b_e=4096, omega=0.6,
                        s_expert=2 * model.expert_bytes, s_params=0)
    return model, hw, workload, plan


def test_per_forward_uncached_expert_traffic_near_86gb():
    model = preset("mixtral-8x7b")
    weights = per_forward_weight_bytes(model, 0)
    expert_part = model.routed_expert_bytes_total
    assert abs(expert_part - 86e9) / 86e9 < 0.10
    assert weights == expert_part + model.num_layers * model.dense_bytes_per_layer


def test_fully_resident_model_leaves_only_kv_traffic():
    model, hw, workload, plan = fig4_setup()
    # one pass over the dataset with every weight cached
    wl = WorkloadSpec(workload.prompt_len, workload.decode_len, int(plan.B),
                      workload.phase)
    cached_plan = BatchingPlan(plan.B, plan.b_a, plan.b_e, plan.omega,
                               plan.s_expert, model.model_bytes)
    traffic = dataset_traffic(model, hw, wl, FullKvOffload(), cached_plan)
    gpu_share = plan.B - round(plan.omega * plan.B)
    kv_only = workload.decode_len * gpu_share * kv_bytes_per_sequence(model, wl)
    assert traffic == kv_only


def test_gpu_cache_smaller_batch_multiplies_weight_traffic():
    model, hw, workload, plan = fig4_setup()
    kv_per_seq = kv_bytes_per_sequence(model, workload)
    capacity = 4_000_000_000
    n = 32 * int(plan.B)
    wl = WorkloadSpec(workload.prompt_len, workload.decode_len, n, workload.phase)
    full = dataset_traffic(model, hw, wl, FullKvOffload(), plan)
    cached = dataset_traffic(model, hw, wl, GpuKvCache(capacity), plan)
    batch_ratio = plan.B / (capacity // kv_per_seq)
    assert cached / full >= 10.0
    assert cached / full <= batch_ratio  # KV copies temper the advantage


def test_crossover_exists_and_found_by_scan():
    model, hw, workload, plan = fig4_setup()
    policy = GpuKvCache(4_000_000_000)
    crossing = crossover_sequences(model, hw, workload, plan, policy)
    assert crossing is not None
    # verify the scan result: cached wins just below, full wins at the point
    below = WorkloadSpec(workload.prompt_len, workload.decode_len,
                         max(1, crossing // 2), workload.phase)
    at = WorkloadSpec(workload.prompt_len, workload.decode_len, crossing,
                      workload.phase)
    assert dataset_traffic(model, hw, below, FullKvOffload(), plan) >= \
        dataset_traffic(model, hw, below, policy, plan)
    assert dataset_traffic(model, hw, at, FullKvOffload(), plan) < \
        dataset_traffic(model, hw, at, policy, plan)


def test_infeasible_policy_below_one_sequence():
    model, hw, workload, plan = fig4_setup()
    with pytest.raises(InfeasiblePolicy):
        dataset_traffic(model, hw, workload, GpuKvCache(1_000), plan)


def test_traffic_monotone_in_dataset_size():
    model, hw, workload, plan = fig4_setup()
    grid = [int(plan.B * f) for f in (1, 2, 4, 8, 16, 32)]
    rows = traffic_rows(model, hw, workload, plan,
                        [("full", FullKvOffload()), ("cache", GpuKvCache(4e9 // 1))],
                        grid)
    for name in ("full", "cache"):
        series = [b for n, p, b in rows if p == name]
        assert series == sorted(series)
    # whole-pass linearity for the full policy
    full = {n: b for n, p, b in rows if p == "full"}
    assert full[grid[1]] == 2 * full[grid[0]]


def test_full_weight_traffic_independent_of_cache_capacity():
    model, hw, workload, plan = fig4_setup()
    full = dataset_traffic(model, hw, workload, FullKvOffload(), plan)
    # changing the rejected policy's capacity cannot affect the full policy
    for capacity in (2e9, 8e9, 16e9):
        again = dataset_traffic(model, hw, workload, FullKvOffload(), plan)
        assert again == full


# -- cost model ---------------------------------------------------------------

VLLM_ROW = [
    Component("8xNVIDIA-A5000", 1600.0, 20.0),
    Component("1xAMD-7453", 100.0, 1.2),
    Component("512GB Host", 80.0, 1.1),
]

SINGLE_GPU_ROW = [
    Component("1xNVIDIA-A5000", 200.0, 2.5),
    Component("1xAMD-7453", 100.0, 1.2),
    Component("512GB Host", 80.0, 1.1),
]


def test_eight_gpu_row_sums():
    report = cost_report(VLLM_ROW, throughput=140.0)
    assert report.total_power_watts == 1780.0
    assert report.total_price == pytest.approx(22.3)


def test_single_gpu_row_sums_and_budget_share():
    report = cost_report(SINGLE_GPU_ROW, throughput=143.0)
    assert report.total_power_watts == 380.0
    assert report.total_price == pytest.approx(4.8)
    share = report.total_price / cost_report(VLLM_ROW, 140.0).total_price
    assert 0.21 <= round(share, 2) <= 0.22


def test_cost_requires_components():
    with pytest.raises(ValueError):
        cost_report([], throughput=1.0)


def test_cost_permutation_invariant():
    a = cost_report(VLLM_ROW, 140.0)
    b = cost_report(list(reversed(VLLM_ROW)), 140.0)
    assert a == b


def test_cost_ratios():
    report = cost_report(SINGLE_GPU_ROW, throughput=380.0)
    assert report.tokens_per_joule == pytest.approx(1.0)
    assert report.tokens_per_price_unit == pytest.approx(380.0 / 4.8)
