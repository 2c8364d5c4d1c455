import csv
import json
from pathlib import Path

import pytest

from moe_planner.cli import main


def run(argv):
    return main([str(a) for a in argv])


def tiny_args(out_dir, extra=()):
    return [
        "--model", "tiny-test", "--profile", "tiny-test",
        "--prompt-len", "64", "--decode-len", "32",
        "--num-sequences", "1024", "--out-dir", out_dir, *extra,
    ]


SMALL_SPACE = [
    "--b-a-grid", "4,16", "--b-e-grid", "64,256",
    "--omega-grid", "0,0.5", "--s-expert-slots", "2,4",
    "--s-params-fracs", "0,1",
]


@pytest.fixture()
def plan_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("plan")
    code = run(["plan", *tiny_args(out, SMALL_SPACE), "--phase", "decode"])
    assert code == 0
    return out / "plan.json"


def test_plan_writes_evaluation(tmp_path, capsys):
    code = run(["plan", *tiny_args(tmp_path, SMALL_SPACE), "--phase", "decode"])
    assert code == 0
    doc = json.loads((tmp_path / "plan.json").read_text())
    assert doc["throughput"] > 0
    assert set(doc["plan"]) == {"B", "b_a", "b_e", "omega", "s_expert", "s_params"}
    assert "decode:" in capsys.readouterr().out


def test_plan_both_phases(tmp_path):
    code = run(["plan", *tiny_args(tmp_path, SMALL_SPACE), "--phase", "both"])
    assert code == 0
    assert (tmp_path / "plan_prefill.json").exists()
    assert (tmp_path / "plan_decode.json").exists()


def test_plan_exit_3_when_host_too_small(tmp_path):
    # host below the model size: no feasible batch
    profile = {
        "hardware": {
            "m_g": 3_000_000, "m_c": 10_000_000,
            "bw_htod": 1e9, "bw_dtoh": 1e9,
            "gpu_peak_flops": 1e11, "gpu_mem_bw": 2e10,
            "gpu_launch_overhead": 2e-5, "cpu_attn_flops": 1e10,
        },
        "latency_tables": [],
    }
    path = tmp_path / "hw.json"
    path.write_text(json.dumps(profile))
    code = run(["plan", "--model", "tiny-test", "--profile", path,
                "--prompt-len", "64", "--decode-len", "32",
                "--num-sequences", "16", "--out-dir", tmp_path])
    assert code == 3


def test_config_error_exit_2(tmp_path):
    assert run(["plan", "--model", "no-such-model", "--out-dir", tmp_path]) == 2
    assert run(["eval", *tiny_args(tmp_path), "--plan", "missing.json"]) == 2
    assert run(["sweep", *tiny_args(tmp_path), "--plan", "missing.json",
                "--variable", "omega"]) == 2


def test_eval_roundtrip(plan_file, tmp_path):
    code = run(["eval", *tiny_args(tmp_path), "--plan", plan_file])
    assert code == 0
    doc = json.loads((tmp_path / "eval.json").read_text())
    original = json.loads(Path(plan_file).read_text())
    assert doc["throughput"] == pytest.approx(original["throughput"])


def test_simulate_writes_report_and_trace(plan_file, tmp_path):
    trace = tmp_path / "trace.jsonl"
    code = run(["simulate", *tiny_args(tmp_path), "--plan", plan_file,
                "--routing-mode", "sampled", "--seed", "7", "--trace", trace])
    assert code == 0
    report = json.loads((tmp_path / "sim_report.json").read_text())
    assert report["makespan"] > 0
    lines = trace.read_text().strip().splitlines()
    assert all(json.loads(l)["action"] in ("start", "finish") for l in lines)


def test_simulate_seed_env_override(plan_file, tmp_path, monkeypatch):
    monkeypatch.setenv("MOE_PLANNER_SEED", "99")
    run(["simulate", *tiny_args(tmp_path / "a"), "--plan", plan_file,
         "--routing-mode", "sampled", "--seed", "7"])
    monkeypatch.delenv("MOE_PLANNER_SEED")
    run(["simulate", *tiny_args(tmp_path / "b"), "--plan", plan_file,
         "--routing-mode", "sampled", "--seed", "99"])
    a = (tmp_path / "a" / "sim_report.json").read_bytes()
    b = (tmp_path / "b" / "sim_report.json").read_bytes()
    assert a == b


def test_sweep_omega_curve(plan_file, tmp_path):
    code = run(["sweep", *tiny_args(tmp_path), "--plan", plan_file,
                "--variable", "omega"])
    assert code == 0
    with open(tmp_path / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 11
    assert {r["variable"] for r in rows} == {"omega"}
    assert all(float(r["throughput"]) >= 0 for r in rows)


def test_sweep_unknown_variable(plan_file, tmp_path):
    assert run(["sweep", *tiny_args(tmp_path), "--plan", plan_file,
                "--variable", "nonsense"]) == 2


def test_sweep_num_sequences_two_series(plan_file, tmp_path):
    code = run(["sweep", *tiny_args(tmp_path), "--plan", plan_file,
                "--variable", "num_sequences", "--kv-capacity", "2e6"])
    assert code == 0
    with open(tmp_path / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    policies = {r["policy"] for r in rows}
    assert policies == {"full_kv_offload", "gpu_kv_cache"}
    # the two series cross: cached wins somewhere, full wins somewhere
    diff = {}
    for r in rows:
        diff.setdefault(int(r["num_sequences"]), {})[r["policy"]] = int(r["bytes"])
    signs = {n: v["full_kv_offload"] - v["gpu_kv_cache"] for n, v in diff.items()}
    assert any(s < 0 for s in signs.values())


def test_traffic_one_pass_kv_only(tmp_path):
    # plan whose s_params covers the whole model: weight traffic vanishes
    out = tmp_path / "p"
    code = run(["plan", *tiny_args(out, SMALL_SPACE), "--phase", "decode"])
    assert code == 0
    doc = json.loads((out / "plan.json").read_text())
    doc["plan"]["s_params"] = 12_000_000  # whole tiny-test model
    plan_path = tmp_path / "cached_plan.json"
    plan_path.write_text(json.dumps(doc))
    n = doc["plan"]["B"]
    code = run(["traffic", "--model", "tiny-test", "--profile", "tiny-test",
                "--prompt-len", "64", "--decode-len", "32",
                "--num-sequences", n, "--out-dir", tmp_path,
                "--plan", plan_path])
    assert code == 0
    with open(tmp_path / "traffic.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    full = next(r for r in rows if r["policy"] == "full_kv_offload")
    kv_per_seq = 96 * 256 * 2
    gpu_share = doc["plan"]["B"] - round(doc["plan"]["omega"] * doc["plan"]["B"])
    assert int(full["bytes"]) == 32 * gpu_share * kv_per_seq


def test_cost_command_table_values(tmp_path):
    comp = [
        {"name": "8xNVIDIA-A5000", "power_watts": 1600, "price": 20.0},
        {"name": "1xAMD-7453", "power_watts": 100, "price": 1.2},
        {"name": "512GB Host", "power_watts": 80, "price": 1.1},
    ]
    path = tmp_path / "components.json"
    path.write_text(json.dumps(comp))
    code = run(["cost", "--components", path, "--throughput", "140",
                "--out-dir", tmp_path])
    assert code == 0
    doc = json.loads((tmp_path / "cost.json").read_text())
    assert doc["total_power_watts"] == 1780.0
    assert doc["total_price"] == pytest.approx(22.3)


def test_dag_export_valid_dot(plan_file, tmp_path):
    code = run(["dag", "export", *tiny_args(tmp_path), "--plan", plan_file,
                "--single-layer", "--json"])
    assert code == 0
    text = (tmp_path / "dag.dot").read_text()
    assert text.startswith("digraph") and text.rstrip().endswith("}")
    doc = json.loads((tmp_path / "dag.json").read_text())
    assert len(doc["nodes"]) > 0
