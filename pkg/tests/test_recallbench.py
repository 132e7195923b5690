from __future__ import annotations

from toollib.gateway import MockEmbedder
from toollib.recallbench import generate_suite, run_scaling


def test_suite_catalogs_are_nested_prefixes():
    suite = generate_suite([100, 300], seed=3, n_queries=20)
    small = [e.tool_id for e in suite.fragmented[100]]
    large = [e.tool_id for e in suite.fragmented[300]]
    assert large[: len(small)] == small  # monotone recall by construction
    assert len(small) == 100 and len(large) == 300


def test_suite_queries_resolve_at_every_scale():
    suite = generate_suite([100, 300], seed=3, n_queries=20)
    agg_ids = {e.tool_id for e in suite.aggregated}
    small_ids = {e.tool_id for e in suite.fragmented[100]}
    for q in suite.queries:
        assert set(q["frag_truth"]) <= small_ids
        assert set(q["agg_truth"]) <= agg_ids


def test_run_scaling_is_deterministic(tmp_path):
    embedder = MockEmbedder(seed=7, dim=64)
    rows_a = run_scaling([100, 300], seed=3, embedder=embedder, k=5, n_queries=20)
    rows_b = run_scaling([100, 300], seed=3, embedder=embedder, k=5, n_queries=20)
    assert rows_a == rows_b
    assert all(
        r["aggregated_recall"] >= r["fragmented_recall"] for r in rows_a
    )
