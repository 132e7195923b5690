from __future__ import annotations

import json

import pytest

from toollib.model import AggregatedTool, LibraryManifest, Tool
from toollib.store import (
    StoreError,
    check_config_lock,
    cluster_dirname,
    library_root,
    load_dataset,
    load_library,
    load_manifest,
    save_aggregated_tool,
    save_manifest,
    save_tools,
    validate_library,
    write_jsonl,
    write_text,
)


def agg_tool(cluster="c_leaf", covered=("t1",)) -> AggregatedTool:
    return AggregatedTool.create(
        facade_name="solve_things",
        facade_code='def solve_things(x: int):\n    """Solve.\n\n    Args:\n        x (int): input\n    """\n    return x\n',
        support_code="",
        description="solves things",
        covered_tools=list(covered),
        cluster=cluster,
    )


def build_library(tmp_path, covered=("t1",), counts=None):
    tool = agg_tool(covered=covered)
    save_aggregated_tool(tmp_path, tool)
    manifest = LibraryManifest(
        clusters={"c_leaf": [tool.tool_id]},
        counts=counts or {"n_questions": 1, "n_fragmented_tools": 1, "n_library_tools": 1},
        config_fingerprint="fp",
    )
    save_manifest(tmp_path, manifest)
    return tool


def test_dataset_roundtrip_and_duplicate_detection(tmp_path):
    rows = [
        {"id": "q1", "question": "a?", "cot": "c", "gold_answer": "1", "grading": "numeric"},
        {"id": "q2", "question": "b?", "cot": "c", "gold_answer": "2", "grading": "numeric"},
    ]
    path = tmp_path / "data.jsonl"
    write_jsonl(path, rows)
    items = load_dataset(path)
    assert [i.id for i in items] == ["q1", "q2"]

    write_jsonl(path, rows + [rows[0]])
    with pytest.raises(StoreError, match="duplicate QAItem id"):
        load_dataset(path)


def test_load_errors_name_the_file(tmp_path):
    path = tmp_path / "broken.jsonl"
    write_text(path, '{"id": "q1"\n')
    with pytest.raises(StoreError, match="broken.jsonl"):
        load_dataset(path)
    with pytest.raises(StoreError, match="missing file"):
        load_dataset(tmp_path / "nope.jsonl")


def test_cluster_dirname_is_safe_and_distinct():
    a = cluster_dirname("c_math/stats")
    b = cluster_dirname("c_math_stats")
    assert a != b
    assert "/" not in a


def test_validate_clean_library(tmp_path):
    tool = Tool.create("orig_tool", "def orig_tool():\n    pass", "", ["q1"])
    build_library(tmp_path, covered=(tool.tool_id,))
    save_tools(tmp_path, [tool])
    assert validate_library(tmp_path) == []


def test_validate_flags_empty_coverage(tmp_path):
    tool = build_library(tmp_path)
    path = library_root(tmp_path) / "clusters" / cluster_dirname("c_leaf") / f"{tool.tool_id}.json"
    record = json.loads(path.read_text())
    record["covered_tools"] = []
    path.write_text(json.dumps(record))
    violations = validate_library(tmp_path)
    assert len(violations) == 1
    assert tool.tool_id[:8] in violations[0].record or "aggregated tool" in violations[0].record


def test_validate_flags_count_inversion(tmp_path):
    build_library(tmp_path)
    manifest_path = library_root(tmp_path) / "manifest.json"
    record = json.loads(manifest_path.read_text())
    record["counts"]["n_library_tools"] = 5  # exceeds n_fragmented_tools=1
    manifest_path.write_text(json.dumps(record))
    violations = validate_library(tmp_path)
    assert len(violations) == 1
    assert violations[0].record == "manifest counts"
    assert "n_library_tools" in violations[0].invariant


def test_validate_flags_broken_syntax(tmp_path):
    tool = build_library(tmp_path)
    path = library_root(tmp_path) / "clusters" / cluster_dirname("c_leaf") / f"{tool.tool_id}.json"
    record = json.loads(path.read_text())
    record["facade_code"] = "def broken(:"
    path.write_text(json.dumps(record))
    violations = validate_library(tmp_path)
    assert any("syntax" in v.invariant for v in violations)


def test_corrupt_manifest_raises_store_error(tmp_path):
    write_text(library_root(tmp_path) / "manifest.json", "{ not json")
    with pytest.raises(StoreError, match="manifest.json"):
        load_manifest(tmp_path)


def test_load_library_roundtrip(tmp_path):
    tool = build_library(tmp_path)
    loaded = load_library(tmp_path)
    assert set(loaded) == {tool.tool_id}
    assert loaded[tool.tool_id].facade_name == "solve_things"


def test_config_lock_refuses_mixed_fingerprints(tmp_path):
    check_config_lock(tmp_path, "fp-one")
    check_config_lock(tmp_path, "fp-one")
    with pytest.raises(StoreError, match="fingerprint mismatch"):
        check_config_lock(tmp_path, "fp-two")
