"""
Inspecting the execution DAG
============================

Builds one decode layer's DAG for a small plan, prints the job list, and
writes Graphviz DOT next to this script.  Node shapes encode the resource
(box = GPU compute, ellipse = CPU, parallelogram = HtoD, trapezium = DtoH).
"""
# %%

from pathlib import Path

from moe_planner import (
    BatchingPlan,
    WorkloadSpec,
    build_layer_dag,
    export_dot,
    preset,
    serialize_resources,
    synth_profile,
    tiny_test_hw,
)

model = preset("tiny-test")
hw = tiny_test_hw()
tables = synth_profile(hw, model)
workload = WorkloadSpec(64, 32, 1, "decode")
plan = BatchingPlan(B=32, b_a=16, b_e=64, omega=0.5,
                    s_expert=2 * model.expert_bytes, s_params=0)

dag = build_layer_dag(model, hw, tables, workload, plan)
print(f"{len(dag.nodes)} nodes, {len(dag.edges)} edges before serialization")
for node in dag.nodes:
    if node.resource is not None:
        print(f"  {node.label:24s} {node.resource.value:12s} "
              f"{node.duration * 1e6:9.1f} µs")

# %%
# Serialization chains same-resource jobs in submission order; the DOT file
# shows both data and chain edges.

chained = serialize_resources(dag)
print(f"\n{len(chained.edges) - len(dag.edges)} chain edges added")
out = Path(__file__).with_name("layer_dag.dot")
out.write_text(export_dot(chained))
print(f"wrote {out}")
