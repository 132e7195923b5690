from __future__ import annotations

import pytest

from conftest import make_gateway
from fixture_code import (
    ABO_GENETICS_CODE,
    APPLY_BAYES_CODE,
    BAYES_FACADE_CODE,
    BAYES_SUPPORT_CODE,
    EQUAL_PRIORS_CODE,
)
from toollib.aggregation import (
    AggregationError,
    aggregate_cluster,
    aggregate_library,
    design_blueprint,
)
from toollib.model import QAItem, Tool
from toollib.runtime import EchoExecutor


def bayes_cluster() -> list[Tool]:
    return [
        Tool.create("apply_bayes", APPLY_BAYES_CODE, "bayes posterior", ["q05"]),
        Tool.create("get_abo_offspring_allele_distribution", ABO_GENETICS_CODE,
                    "abo genetics", ["q06"]),
        Tool.create("equal_priors", EQUAL_PRIORS_CODE, "equal priors", ["q07"]),
    ]


def bayes_items() -> list[QAItem]:
    return [
        QAItem(id="q05", question="Posterior after one observation?", cot="bayes",
               gold_answer="0.615", grading="numeric"),
        QAItem(id="q06", question="Probability the twins are identical?", cot="genetics",
               gold_answer="0.52", grading="numeric"),
        QAItem(id="q07", question="Minimum flips to trust the coin is biased?",
               cot="priors", gold_answer="5", grading="numeric"),
    ]


def sib_reply(n_tools: int) -> str:
    covered = ", ".join(str(i) for i in range(1, n_tools + 1))
    return (
        "<SIB>\n[SIB]Bayesian Scenario Analysis\n"
        "[Description]\nPosterior updates for competing hypotheses.\n"
        "[SIB Class Description]\nHypothesis containers and a solver engine.\n"
        "[Public Function Description]\nOne facade taking a JSON scenario spec.\n"
        f"[Covered Tools]\n{covered}\n</SIB>"
    )


def bayes_artifact() -> str:
    return (
        "<code>\n<class>\n" + BAYES_SUPPORT_CODE + "\n</class>\n"
        "<function_1>\n" + BAYES_FACADE_CODE + "\n</function_1>\n</code>"
    )


def pass_report() -> str:
    return (
        '<final_report>{"is_library_helpful": "PASS", "reason": "tools suffice",'
        ' "modification_suggestions": ""}</final_report>'
    )


def solver_answer() -> str:
    return "<analysis>used the facade</analysis><answer>0.615</answer>"


def happy_responder(n_tools: int = 3):
    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            return sib_reply(n_tools)
        if t == "aggregation_implement":
            return bayes_artifact()
        if t == "tool_verification":
            return solver_answer()
        if t == "review_feedback":
            return pass_report()
        raise AssertionError(t)

    return responder


def test_design_blueprint_single_sib_covers_cluster():
    gateway = make_gateway(happy_responder())
    blueprint = design_blueprint(gateway, bayes_cluster())
    assert len(blueprint.sibs) == 1
    assert len(blueprint.sibs[0].covered_tools) == 3


def test_design_blueprint_singleton_cluster():
    gateway = make_gateway(happy_responder(n_tools=1))
    blueprint = design_blueprint(gateway, bayes_cluster()[:1])
    assert len(blueprint.sibs[0].covered_tools) == 1


def test_design_blueprint_missing_coverage_surfaces_error():
    gateway = make_gateway(
        lambda request: sib_reply(2)  # covers 1,2 of a 3-tool cluster
    )
    with pytest.raises(AggregationError, match="uncovered"):
        design_blueprint(gateway, bayes_cluster())


def test_aggregate_cluster_happy_path(base_config):
    gateway = make_gateway(happy_responder())
    outcome = aggregate_cluster(
        gateway, EchoExecutor(), "c_bayes", bayes_cluster(), bayes_items(), base_config
    )
    assert not outcome.failed
    assert outcome.converged
    assert outcome.review_cycles == 1
    assert len(outcome.aggregated) == 1
    tool = outcome.aggregated[0]
    assert tool.facade_name == "bayesian_scenario_solver"
    assert len(tool.covered_tools) == 3
    assert tool.cluster == "c_bayes"
    assert "high-level facade" in tool.description


def test_implement_retries_after_syntax_error(base_config):
    attempts = {"n": 0}

    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            return sib_reply(3)
        if t == "aggregation_implement":
            attempts["n"] += 1
            return "<code><function_1>def broken(:\n</function_1></code>"
        if t == "aggregation_syntax_fix":
            attempts["n"] += 1
            return bayes_artifact()
        if t == "tool_verification":
            return solver_answer()
        if t == "review_feedback":
            return pass_report()
        raise AssertionError(t)

    gateway = make_gateway(responder)
    outcome = aggregate_cluster(
        gateway, EchoExecutor(), "c_bayes", bayes_cluster(), bayes_items(), base_config
    )
    assert not outcome.failed
    assert attempts["n"] == 2  # one broken artifact, one interpreter-guided fix
    implement_events = [e for e in outcome.audit if e["phase"] == "implement"]
    assert [e["ok"] for e in implement_events] == [False, True]


def test_persistent_syntax_failure_passes_originals_through(base_config):
    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            return sib_reply(3)
        if t in ("aggregation_implement", "aggregation_syntax_fix"):
            return "<code><function_1>def broken(:\n</function_1></code>"
        raise AssertionError(t)

    gateway = make_gateway(responder)
    cluster = bayes_cluster()
    outcome = aggregate_cluster(
        gateway, EchoExecutor(), "c_bayes", cluster, bayes_items(), base_config
    )
    assert outcome.failed
    assert len(outcome.aggregated) == len(cluster)
    assert sorted(t.facade_name for t in outcome.aggregated) == sorted(
        t.name for t in cluster
    )
    for aggregated in outcome.aggregated:
        assert len(aggregated.covered_tools) == 1


def test_review_need_patching_then_pass_keeps_refined_code(base_config):
    reviews = {"n": 0}

    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            return sib_reply(3)
        if t == "aggregation_implement":
            return bayes_artifact()
        if t == "tool_verification":
            return solver_answer()
        if t == "review_feedback":
            reviews["n"] += 1
            if reviews["n"] <= 3:  # first cycle: every sampled question reports a gap
                return (
                    '<final_report>{"is_library_helpful": "NEED_PATCHING",'
                    ' "reason": "missing direct evidence path",'
                    ' "modification_suggestions": "handle direct_likelihoods"}'
                    "</final_report>"
                )
            return pass_report()
        if t == "refine_codes":
            assert "handle direct_likelihoods" in request.bindings["feedback"]
            return bayes_artifact().replace(
                "various Bayesian scenarios", "various refined Bayesian scenarios"
            )
        raise AssertionError(t)

    gateway = make_gateway(responder)
    outcome = aggregate_cluster(
        gateway, EchoExecutor(), "c_bayes", bayes_cluster(), bayes_items(), base_config
    )
    assert outcome.review_cycles == 2
    assert outcome.converged
    assert "refined Bayesian" in outcome.aggregated[0].description


def test_review_cap_keeps_last_version_flagged(base_config):
    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            return sib_reply(3)
        if t in ("aggregation_implement", "refine_codes"):
            return bayes_artifact()
        if t == "tool_verification":
            return solver_answer()
        if t == "review_feedback":
            return (
                '<final_report>{"is_library_helpful": "NEED_PATCHING",'
                ' "reason": "never good enough", "modification_suggestions": "more"}'
                "</final_report>"
            )
        raise AssertionError(t)

    gateway = make_gateway(responder)
    outcome = aggregate_cluster(
        gateway, EchoExecutor(), "c_bayes", bayes_cluster(), bayes_items(), base_config
    )
    assert not outcome.converged
    assert outcome.review_cycles == base_config.aggregation_max_turns
    assert outcome.aggregated  # last version kept


def test_executor_errors_flow_into_review_context(base_config):
    seen_transcripts = []

    class FailingExecutor:
        def invoke(self, tool, function_name, arguments, timeout_s):
            from toollib.runtime import ExecResult

            return ExecResult(ok=False, result="", stderr="boom")

    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            return sib_reply(3)
        if t == "aggregation_implement":
            return bayes_artifact()
        if t == "tool_verification":
            from toollib.gateway import Completion, ToolCall

            return Completion(
                text="calling the facade",
                tool_calls=(ToolCall("bayesian_scenario_solver", '{"scenario_spec_json": "{}"}'),),
            )
        if t == "solve_continue":
            return solver_answer()
        if t == "review_feedback":
            seen_transcripts.append(request.bindings["weaker_llm_message"])
            return pass_report()
        raise AssertionError(t)

    gateway = make_gateway(responder)
    outcome = aggregate_cluster(
        gateway, FailingExecutor(), "c_bayes", bayes_cluster(), bayes_items(), base_config
    )
    assert not outcome.failed
    assert any("error: boom" in t for t in seen_transcripts)


def test_aggregate_library_counts_and_storage(base_config, tmp_path):
    gateway = make_gateway(happy_responder())
    cluster = bayes_cluster()
    manifest, stored, stats = aggregate_library(
        gateway,
        EchoExecutor(),
        {"c_bayes": cluster},
        {"c_bayes": ["q05", "q06", "q07"]},
        bayes_items(),
        n_fragmented=len(cluster),
        cfg=base_config,
        out_dir=tmp_path,
    )
    assert manifest.counts == {
        "n_questions": 3, "n_fragmented_tools": 3, "n_library_tools": 1,
    }
    assert manifest.failed_clusters == []
    assert stats.to_dict()["max_review_cycles"] == 1
    assert (tmp_path / "library" / "manifest.json").exists()
    stored_ids = manifest.clusters["c_bayes"]
    assert len(stored_ids) == 1


def test_aggregation_of_distinct_clusters_commutes(base_config, tmp_path):
    """Any processing order yields identical stored bytes."""
    from golden_helpers import dir_digest

    cluster_b = [
        Tool.create("ohm_current", "def ohm_current(v, r):\n    return v / r",
                    "ohm current", ["q11"]),
    ]
    items = bayes_items() + [
        QAItem(id="q11", question="Current at 12 V across 4 ohms?", cot="I = V/R",
               gold_answer="3", grading="numeric"),
    ]

    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            n = request.bindings["tool_code_list"].count("# Tool ")
            return sib_reply(n)
        if t == "aggregation_implement":
            return bayes_artifact()
        if t == "tool_verification":
            return solver_answer()
        if t == "review_feedback":
            return pass_report()
        raise AssertionError(t)

    members_forward = {"c_bayes": bayes_cluster(), "c_ohm": cluster_b}
    members_reverse = {"c_ohm": cluster_b, "c_bayes": bayes_cluster()}
    sources = {"c_bayes": ["q05", "q06", "q07"], "c_ohm": ["q11"]}

    out_a = tmp_path / "forward"
    out_b = tmp_path / "reverse"
    aggregate_library(make_gateway(responder), EchoExecutor(), members_forward,
                      sources, items, n_fragmented=4, cfg=base_config, out_dir=out_a)
    aggregate_library(make_gateway(responder), EchoExecutor(), members_reverse,
                      sources, items, n_fragmented=4, cfg=base_config, out_dir=out_b)
    assert dir_digest(out_a) == dir_digest(out_b)


def test_repeated_coverage_failure_splits_cluster_in_half(base_config):
    """A blueprint that keeps missing tools falls back to blueprinting
    tool_id-ordered halves."""
    cluster = bayes_cluster()
    full_size = len(cluster)

    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            n = request.bindings["tool_code_list"].count("# Tool ")
            if n == full_size:
                return sib_reply(n - 1)  # always leaves one tool uncovered
            return sib_reply(n)  # halves blueprint fine
        if t == "aggregation_implement":
            return bayes_artifact()
        if t == "tool_verification":
            return solver_answer()
        if t == "review_feedback":
            return pass_report()
        raise AssertionError(t)

    outcome = aggregate_cluster(
        make_gateway(responder), EchoExecutor(), "c_bayes", cluster, bayes_items(),
        base_config,
    )
    assert not outcome.failed
    covered = sorted(t for agg in outcome.aggregated for t in agg.covered_tools)
    assert covered == sorted(t.tool_id for t in cluster)
    assert len(outcome.aggregated) == 2  # one facade per half


def test_failed_cluster_is_flagged_and_library_still_validates(base_config, tmp_path):
    from toollib.store import save_tools, validate_library

    def responder(request):
        t = request.template_id
        if t == "blueprint_design":
            n = request.bindings["tool_code_list"].count("# Tool ")
            return sib_reply(n)
        if t in ("aggregation_implement", "aggregation_syntax_fix"):
            return "<code><function_1>def broken(:\n</function_1></code>"
        raise AssertionError(t)

    cluster = bayes_cluster()
    manifest, _stored, stats = aggregate_library(
        make_gateway(responder), EchoExecutor(), {"c_bayes": cluster},
        {"c_bayes": ["q05", "q06", "q07"]}, bayes_items(),
        n_fragmented=len(cluster), cfg=base_config, out_dir=tmp_path,
    )
    assert manifest.failed_clusters == ["c_bayes"]
    assert stats.failed_clusters == ["c_bayes"]
    save_tools(tmp_path, cluster)
    assert validate_library(tmp_path) == []
