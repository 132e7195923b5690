"""Acceptance suite: one test per acceptance criterion, at the stated
tolerances, runnable with scripted backends and the canned executor only.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
pass lines.
"""

from __future__ import annotations

import heapq
import json
import random
import time
from pathlib import Path

import numpy as np
import pytest

from golden_helpers import dir_digest, run_golden_pipeline
from schema_corpus import CORPUS as SCHEMA_CORPUS
from toollib import codec
from toollib.clustering import apply_ops, assign_tools
from toollib.codec import ParseError
from toollib.config import PipelineConfig
from toollib.gateway import Completion, MockEmbedder, ToolCall
from toollib.index import VectorIndex, build_index, knn
from toollib.model import AggregatedTool, ClusterNode, ClusterTree, QAItem, Tool
from toollib.recallbench import run_scaling
from toollib.runtime import EchoExecutor, SolveLimits, grade, solve
from toollib.schema import CatalogEntry, ToolSchema, build_schema, parse_signature

from conftest import make_gateway


def ok(name: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS")


# --- 1. golden pipeline determinism ------------------------------------------------


def test_golden_pipeline_determinism(tmp_path):
    started = time.monotonic()
    run_a = tmp_path / "a"
    run_b = tmp_path / "b"
    run_golden_pipeline(run_a)
    run_golden_pipeline(run_b)

    assert dir_digest(run_a / "library") == dir_digest(run_b / "library")
    manifest = json.loads((run_a / "library" / "manifest.json").read_text())
    assert manifest["counts"]["n_fragmented_tools"] == 17
    assert manifest["counts"]["n_library_tools"] == 6
    assert (run_a / "library" / "manifest.json").read_bytes() == (
        run_b / "library" / "manifest.json"
    ).read_bytes()
    assert (run_a / "index.bin").read_bytes() == (run_b / "index.bin").read_bytes()

    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"golden runs took {elapsed:.1f}s"
    ok("golden-pipeline-determinism")


# --- 2. loop-bound compliance --------------------------------------------------------


def test_loop_bound_compliance(tmp_path):
    defaults = PipelineConfig()
    assert defaults.creation_max_turns == 3
    assert defaults.aggregation_max_turns == 3
    assert defaults.max_update_rounds == 500
    assert defaults.seed_size == 1000
    assert defaults.batch_size == 200

    run_golden_pipeline(tmp_path, commands=("create", "cluster", "aggregate"))
    creation = json.loads((tmp_path / "creation_stats.json").read_text())
    assert creation["max_turns_observed"] <= 3
    assert all(turns <= 3 for turns in creation["turns_per_tool"].values())
    # the two-FAIL fixture tool actually exercises the cap
    assert creation["max_turns_observed"] == 3

    clustering = json.loads((tmp_path / "clustering_stats.json").read_text())
    assert clustering["update_rounds"] <= 500

    aggregation = json.loads((tmp_path / "aggregation_stats.json").read_text())
    assert aggregation["max_review_cycles"] <= 3
    assert all(c <= 3 for c in aggregation["review_cycles"].values())
    ok("loop-bound-compliance")


# --- 3. cluster-tree property suite ---------------------------------------------------


def base_tree() -> ClusterTree:
    tree = ClusterTree(4)
    tree.add_node(ClusterNode("root", 0, None, children=["branch_a", "branch_b"]))
    tree.add_node(ClusterNode("branch_a", 1, "root", children=["leaf_a1"]))
    tree.add_node(ClusterNode("branch_b", 1, "root", children=["leaf_b1"]))
    tree.add_node(ClusterNode("leaf_a1", 2, "branch_a"))
    tree.add_node(ClusterNode("leaf_b1", 2, "branch_b"))
    return tree


def random_op(rng: random.Random, tree: ClusterTree, serial: int) -> dict:
    nodes = sorted(tree.nodes)
    leaves = tree.leaf_ids()
    choice = rng.randrange(6)
    if choice == 0:  # valid ADD under a random non-populated node
        parent = rng.choice(nodes)
        return {
            "action": "ADD_NODE",
            "node_id": f"n{serial}",
            "level": tree.nodes[parent].level + 1,
            "parent": parent,
            "description": "",
        }
    if choice == 1:  # unknown parent
        return {"action": "ADD_NODE", "node_id": f"n{serial}", "level": 1,
                "parent": f"ghost{serial}", "description": ""}
    if choice == 2:  # wrong level
        parent = rng.choice(nodes)
        return {"action": "ADD_NODE", "node_id": f"n{serial}",
                "level": tree.nodes[parent].level + 2, "parent": parent,
                "description": ""}
    if choice == 3:  # duplicate id
        return {"action": "ADD_NODE", "node_id": rng.choice(nodes), "level": 1,
                "parent": "root", "description": ""}
    if choice == 4:  # modify: fresh child or a leaf merge
        target = rng.choice(nodes)
        child = rng.choice([f"n{serial}"] + leaves)
        return {"action": "MODIFY_NODE", "node_id": target, "add_children": [child]}
    return {"action": "MODIFY_NODE", "node_id": f"ghost{serial}",
            "add_children": [f"n{serial}"]}


def test_cluster_tree_property_suite():
    gateway = make_gateway(lambda request: Completion(text="unused"))
    violations = 0
    serial = 0
    for seed in range(1000):
        rng = random.Random(seed)
        tree = base_tree()
        for _round in range(rng.randint(1, 5)):
            serial += 1
            ops = [random_op(rng, tree, serial * 10 + i) for i in range(rng.randint(1, 3))]
            before = tree.to_json()
            updated, warnings = apply_ops(tree, ops)
            if warnings:
                if updated.to_json() != before:
                    violations += 1  # rollback must leave the tree byte-identical
            else:
                if updated.validate():
                    violations += 1
            if any(n.level > 4 for n in updated.nodes.values()):
                violations += 1
            tree = updated

        # assignment: replies may name leaves, internal nodes, or garbage
        tools = [
            Tool.create(f"tool_{seed}_{i}", f"def tool_{seed}_{i}():\n    pass",
                        "synthetic tool", [f"q{i}"])
            for i in range(rng.randint(1, 4))
        ]
        leaves = tree.leaf_ids()

        def assigner(request, rng=rng, tree=tree, leaves=leaves):
            roll = rng.randrange(4)
            if roll == 0:
                return Completion(text=json.dumps([rng.choice(leaves)]))
            if roll == 1:
                return Completion(text=json.dumps(["root"]))  # internal node
            if roll == 2:
                return Completion(text=json.dumps(["no_such_leaf"]))
            return Completion(text="not even json")

        assignment = assign_tools(make_gateway(assigner), tree, tools)
        for tool in tools:
            chosen = assignment.assignments.get(tool.tool_id, [])
            if not chosen or any(not tree.is_leaf(leaf) for leaf in chosen):
                violations += 1
    assert violations == 0
    ok("cluster-tree-property-suite")


# --- 4. parser corpus ------------------------------------------------------------------


def test_parser_corpus():
    corpus_dir = Path(__file__).parent / "data" / "replies"
    index = json.loads((corpus_dir / "index.json").read_text(encoding="utf-8"))
    well_formed = [e for e in index if e["expect"] == "ok"]
    mutated = [e for e in index if e["expect"] == "error"]
    assert len(well_formed) >= 40
    assert len(mutated) >= 20
    assert {e["kind"] for e in well_formed} == set(codec.REPLY_KINDS)

    for entry in well_formed:
        text = (corpus_dir / entry["file"]).read_text(encoding="utf-8")
        reply = codec.parse(entry["kind"], text, tool_ids=entry.get("tool_ids", []))
        assert reply.payload is not None, entry["file"]
    for entry in mutated:
        text = (corpus_dir / entry["file"]).read_text(encoding="utf-8")
        with pytest.raises(ParseError):
            codec.parse(entry["kind"], text, tool_ids=entry.get("tool_ids", []))
    ok("parser-corpus")


# --- 5. schema extraction ---------------------------------------------------------------


def test_schema_extraction_corpus():
    assert len(SCHEMA_CORPUS) == 20
    for name, code, expected_kinds, expected_required in SCHEMA_CORPUS:
        tool = AggregatedTool.create(
            facade_name=parse_signature(code)[0],
            facade_code=code,
            support_code="",
            description="corpus entry",
            covered_tools=["t1"],
            cluster="leaf",
        )
        schema = build_schema(tool)
        got_kinds = {p.name: p.kind for p in schema.parameters}
        got_required = {p.name: p.required for p in schema.parameters}
        assert got_kinds == expected_kinds, f"{name}: {got_kinds} != {expected_kinds}"
        assert got_required == expected_required, name

    bayes_code = next(c for n, c, _k, _r in SCHEMA_CORPUS if n == "bayes_scenario_facade")
    schema = build_schema(
        AggregatedTool.create(
            facade_name="bayesian_scenario_solver",
            facade_code=bayes_code,
            support_code="",
            description="",
            covered_tools=["t1"],
            cluster="leaf",
        )
    )
    required_json = [
        p for p in schema.parameters if p.kind == "json_string" and p.required
    ]
    assert len(schema.parameters) == 1
    assert len(required_json) == 1
    ok("schema-extraction")


# --- 6. k-NN exactness --------------------------------------------------------------------


class PresetEmbedder:
    """Maps query text "q<i>" to a preset unit vector, bypassing hashing."""

    def __init__(self, queries: np.ndarray) -> None:
        self.dim = queries.shape[1]
        self._queries = queries

    def embed(self, texts):
        return np.stack([self._queries[int(t[1:])] for t in texts])


def test_knn_exactness_against_brute_force():
    rng = np.random.default_rng(2024)
    n, dim, n_queries = 10_000, 64, 1000
    vectors = rng.standard_normal((n, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    queries = rng.standard_normal((n_queries, dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)

    tool_ids = [f"t-{i:05d}" for i in range(n)]
    index = VectorIndex(dim=dim, tool_ids=tool_ids, vectors=vectors,
                        texts=[""] * n)
    index.validate()
    embedder = PresetEmbedder(queries)

    for qi in range(n_queries):
        got = {h["tool_id"] for h in knn(index, f"q{qi}", 5, embedder)}
        scored = ((-float(np.dot(vectors[row], queries[qi])), tool_ids[row])
                  for row in range(n))
        oracle = {tid for _neg, tid in heapq.nsmallest(5, scored)}
        assert got == oracle, f"query {qi}"
    ok("knn-exactness")


# --- 7. retrieval-scaling reproduction ------------------------------------------------------

# frozen from the first run of the seeded generator (seed 0, 300 queries,
# mock embedder seed 7 / dim 256)
FROZEN_RECALL = {
    1000: {"fragmented": 300 / 300, "aggregated": 300 / 300},
    5000: {"fragmented": 94 / 300, "aggregated": 300 / 300},
    10000: {"fragmented": 45 / 300, "aggregated": 300 / 300},
    20000: {"fragmented": 21 / 300, "aggregated": 300 / 300},
}


def test_retrieval_scaling_reproduction(tmp_path):
    started = time.monotonic()
    embedder = MockEmbedder(seed=7, dim=256)
    rows = run_scaling([1000, 5000, 10000, 20000], seed=0, embedder=embedder,
                       k=5, n_queries=300, out_dir=tmp_path)
    frag = [r["fragmented_recall"] for r in rows]
    agg = [r["aggregated_recall"] for r in rows]

    assert all(a >= f for a, f in zip(agg, frag)), rows
    assert all(frag[i] >= frag[i + 1] for i in range(len(frag) - 1)), frag
    gap_first = agg[0] - frag[0]
    gap_last = agg[-1] - frag[-1]
    assert gap_last >= gap_first, rows

    for row in rows:
        frozen = FROZEN_RECALL[row["scale"]]
        assert row["fragmented_recall"] == pytest.approx(frozen["fragmented"], abs=1e-12)
        assert row["aggregated_recall"] == pytest.approx(frozen["aggregated"], abs=1e-12)

    elapsed = time.monotonic() - started
    assert elapsed < 300.0, f"scaling suite took {elapsed:.1f}s"

    print("\nretrieval scaling:", json.dumps(rows, indent=2))
    ok("retrieval-scaling")


# --- 8. solver termination and grading -------------------------------------------------------


def runtime_fixture(seed_dim: int = 64):
    tools = []
    for i in range(4):
        code = (
            f"def helper_{i}(x: float) -> str:\n"
            f'    """Helper {i} explains value x.\n\n'
            f"    Args:\n        x (float): input value, e.g. 1.0\n"
            f'    """\n    return f"helper_{i}({{x}})"\n'
        )
        tools.append(
            AggregatedTool.create(
                facade_name=f"helper_{i}",
                facade_code=code,
                support_code="",
                description=f"synthetic helper number {i}",
                covered_tools=[f"orig{i}"],
                cluster="c_synthetic",
            )
        )
    library = {t.tool_id: t for t in tools}
    catalog = {t.tool_id: CatalogEntry(t.tool_id, build_schema(t)) for t in tools}
    return library, catalog


def test_solver_termination_and_grading():
    library, catalog = runtime_fixture()
    limits = SolveLimits(max_tool_calls=6, max_retrievals=2)
    names = sorted(e.schema.name for e in catalog.values())

    for seed in range(200):
        rng = random.Random(seed)

        def responder(request, rng=rng):
            t = request.template_id
            if t == "search_query":
                return Completion(text=f"synthetic helper query {rng.randrange(4)}")
            if t in ("solve_round", "solve_continue"):
                roll = rng.randrange(6)
                if roll == 0:
                    return Completion(
                        text="<analysis>done</analysis><answer>B</answer>"
                    )
                if roll == 1:
                    return Completion(text="rambling with no structure at all")
                if roll == 2:
                    return Completion(
                        text="",
                        tool_calls=(ToolCall("search_tools", '{"query": "again"}'),),
                    )
                if roll == 3:
                    return Completion(
                        text="",
                        tool_calls=(ToolCall("no_such_tool", "{}"),),
                    )
                calls = tuple(
                    ToolCall(rng.choice(names), json.dumps({"x": rng.random()}))
                    for _ in range(rng.randint(1, 3))
                )
                return Completion(text="", tool_calls=calls)
            raise AssertionError(t)

        gateway = make_gateway(responder)
        index = build_index(list(catalog.values()), gateway.embedder)
        item = QAItem(id=f"r{seed}", question=f"synthetic question {seed}?",
                      cot="", gold_answer="B", grading="multiple_choice")
        trajectory = solve(
            gateway, index, library, catalog, EchoExecutor(), item, limits, k=3
        )
        trajectory.validate()
        solver_rounds = [
            e for e in gateway.call_log()
            if e["template_id"] in ("solve_round", "solve_continue")
        ]
        query_calls = [
            e for e in gateway.call_log() if e["template_id"] == "search_query"
        ]
        assert len(solver_rounds) + len(query_calls) <= (
            limits.max_tool_calls + limits.max_retrievals + 1
        )
        tool_steps = [s for s in trajectory.steps if s.kind == "tool_call"]
        assert len(tool_steps) <= limits.max_tool_calls
        retrieved_steps = [s for s in trajectory.steps if s.kind == "retrieved"]
        assert 1 <= len(retrieved_steps) <= limits.max_retrievals

    from test_runtime import GRADING_TABLE

    assert len(GRADING_TABLE) == 12
    for answer, gold, kind, expected in GRADING_TABLE:
        item = QAItem(id="g", question="q", cot="", gold_answer=gold, grading=kind)
        assert grade(answer, item).correct is expected, (answer, gold, kind)
    ok("solver-termination-and-grading")
