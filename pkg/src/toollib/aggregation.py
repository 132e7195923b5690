"""Phase 3: per cluster, design a blueprint, implement it, then iterate a
review loop in which the solver answers the cluster's source questions with
the aggregated tools and a reviewer issues PASS / NEED_PATCHING reports."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import codec, schema
from .config import PipelineConfig
from .gateway import ChatMessage, ChatRequest, Gateway
from .model import AggregatedTool, Blueprint, LibraryManifest, QAItem, SIBSpec, Tool
from .store import append_audit, save_aggregated_tool, save_manifest
from .syntax import syntax_check

log = logging.getLogger(__name__)


class AggregationError(Exception):
    pass


@dataclass
class SibBuild:
    spec: SIBSpec
    blueprint_text: str
    tools: list[AggregatedTool]
    artifact: dict


@dataclass
class ClusterOutcome:
    node_id: str
    aggregated: list[AggregatedTool]
    reports: list[dict]
    failed: bool = False
    converged: bool = True
    review_cycles: int = 0
    audit: list[dict] = field(default_factory=list)


@dataclass
class AggregationStats:
    review_cycles: dict[str, int] = field(default_factory=dict)
    failed_clusters: list[str] = field(default_factory=list)
    non_converged: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "review_cycles": dict(sorted(self.review_cycles.items())),
            "failed_clusters": sorted(self.failed_clusters),
            "non_converged": sorted(self.non_converged),
            "max_review_cycles": max(self.review_cycles.values(), default=0),
        }


def _request(template_id: str, bindings: dict[str, str], role: str = "general") -> ChatRequest:
    return ChatRequest(
        role_slot=role,
        messages=[ChatMessage("user", codec.render(template_id, bindings))],
        template_id=template_id,
        bindings=bindings,
    )


class _AuditingGateway:
    """Mirrors every prompt/reply pair of one cluster into its audit log."""

    def __init__(self, inner: Gateway, audit: list[dict]) -> None:
        self._inner = inner
        self._audit = audit

    @property
    def embedder(self):
        return self._inner.embedder

    def embed(self, texts):
        return self._inner.embed(texts)

    def complete(self, request: ChatRequest):
        completion = self._inner.complete(request)
        self._audit.append(
            {
                "phase": "gateway",
                "role": request.role_slot,
                "template": request.template_id,
                "prompt": request.messages[0].content if request.messages else "",
                "reply": completion.text,
                "tool_calls": [
                    {"name": c.name, "arguments": c.arguments}
                    for c in completion.tool_calls
                ],
            }
        )
        return completion


class _AuditingExecutor:
    """Records every tool invocation outcome into the cluster audit log."""

    def __init__(self, inner, audit: list[dict]) -> None:
        self._inner = inner
        self._audit = audit

    def invoke(self, tool, function_name, arguments, timeout_s):
        outcome = self._inner.invoke(tool, function_name, arguments, timeout_s)
        self._audit.append(
            {
                "phase": "execution",
                "function": function_name,
                "arguments": arguments,
                "ok": outcome.ok,
                "result": outcome.result,
                "stderr": outcome.stderr,
            }
        )
        return outcome


def render_tool_code_list(tools: list[Tool]) -> str:
    parts = []
    for i, tool in enumerate(tools, start=1):
        parts.append(f"# Tool {i}: {tool.name}\n{tool.code.rstrip()}")
    return "\n\n".join(parts)


def design_blueprint(
    gateway: Gateway, cluster_tools: list[Tool], retries: int = 2
) -> Blueprint:
    """Blueprint with full coverage of the cluster; raises after retries.

    Tools are presented in tool_id order, which fixes the 1-based indices the
    reply's [Covered Tools] sections refer to.
    """
    if not cluster_tools:
        raise AggregationError("cannot blueprint an empty cluster")
    ordered = sorted(cluster_tools, key=lambda t: t.tool_id)
    tool_ids = [t.tool_id for t in ordered]
    bindings = {"tool_code_list": render_tool_code_list(ordered)}
    errors: list[str] = []
    for _attempt in range(retries + 1):
        completion = gateway.complete(_request("blueprint_design", bindings))
        try:
            return codec.parse_blueprint(completion.text, tool_ids).payload
        except codec.ParseError as exc:
            errors.append(str(exc))
    raise AggregationError("blueprint failed after retries: " + "; ".join(errors))


def _blueprint_with_split(
    gateway: Gateway, cluster_tools: list[Tool], retries: int
) -> Blueprint:
    """Fall back to blueprinting tool_id-ordered halves when coverage keeps
    failing; singleton clusters have nowhere left to split."""
    try:
        return design_blueprint(gateway, cluster_tools, retries)
    except AggregationError:
        if len(cluster_tools) <= 1:
            raise
        ordered = sorted(cluster_tools, key=lambda t: t.tool_id)
        mid = len(ordered) // 2
        log.warning("splitting %d-tool cluster in half after coverage failures", len(ordered))
        left = _blueprint_with_split(gateway, ordered[:mid], retries)
        right = _blueprint_with_split(gateway, ordered[mid:], retries)
        return Blueprint(sibs=left.sibs + right.sibs)


def _facade_tool(
    function_code: str, support_code: str, sib: SIBSpec, node_id: str
) -> AggregatedTool:
    name, _params = schema.parse_signature(function_code)
    description = schema.first_doc_paragraph(function_code)
    return AggregatedTool.create(
        facade_name=name,
        facade_code=function_code,
        support_code=support_code,
        description=description,
        covered_tools=list(sib.covered_tools),
        cluster=node_id,
    )


def _artifact_to_tools(
    payload: dict, sib: SIBSpec, node_id: str
) -> tuple[list[AggregatedTool], str | None]:
    """Materialize facades; returns (tools, error) where error means the
    artifact needs another fix round."""
    support = payload["support_code"]
    tools = []
    for fn in payload["functions"]:
        combined = (support + "\n\n" + fn["code"]) if support else fn["code"]
        report = syntax_check(combined)
        if not report.ok:
            return [], f"function_{fn['index']}: {report.message}"
        try:
            tools.append(_facade_tool(fn["code"], support, sib, node_id))
        except schema.ExtractError as exc:
            return [], f"function_{fn['index']}: {exc}"
    return tools, None


def _implement_sib(
    gateway: Gateway,
    sib: SIBSpec,
    tool_ids: list[str],
    node_id: str,
    syntax_turns: int,
    audit: list[dict],
) -> SibBuild | None:
    """Implementation call plus up to ``syntax_turns`` interpreter-guided
    fixes; None when the code never compiles."""
    blueprint_text = codec.serialize_blueprint(Blueprint(sibs=[sib]), tool_ids)
    completion = gateway.complete(
        _request("aggregation_implement", {"blueprint": blueprint_text})
    )
    reply_text = completion.text
    for turn in range(syntax_turns + 1):
        try:
            payload = codec.parse_code_artifact(reply_text).payload
            tools, error = _artifact_to_tools(payload, sib, node_id)
        except codec.ParseError as exc:
            payload, tools, error = None, [], str(exc)
        audit.append(
            {
                "phase": "implement",
                "sib": sib.title,
                "turn": turn,
                "ok": error is None,
                "error": error or "",
            }
        )
        if error is None:
            return SibBuild(sib, blueprint_text, tools, payload)
        if turn == syntax_turns:
            break
        completion = gateway.complete(
            _request(
                "aggregation_syntax_fix",
                {"blueprint": blueprint_text, "code": reply_text, "error": error},
            )
        )
        reply_text = completion.text
    return None


def _render_aggregated_code(builds: list[SibBuild]) -> str:
    parts = []
    for build in builds:
        for tool in build.tools:
            parts.append(tool.full_code)
    return "\n".join(parts)


def _solver_answers(
    gateway: Gateway,
    executor,
    question: QAItem,
    builds: list[SibBuild],
    timeout_ms: int,
    max_calls: int = 4,
) -> tuple[str, str]:
    """Let the solver answer one source question with only the aggregated
    tools; returns (transcript, final reply). Execution errors flow back to
    the solver as tool results and stay in the transcript."""
    by_name = {t.facade_name: t for b in builds for t in b.tools}
    tools_description = "\n\n".join(
        f"{t.facade_name}: {t.description}\n{t.full_code}" for t in by_name.values()
    )
    bindings = {"question": question.question, "tools_description": tools_description}
    transcript: list[str] = []
    completion = gateway.complete(_request("tool_verification", bindings, role="solver"))
    transcript.append(f"assistant: {completion.text}")
    calls_done = 0
    while completion.tool_calls and calls_done < max_calls:
        results: list[str] = []
        for call in completion.tool_calls:
            calls_done += 1
            tool = by_name.get(call.name)
            if tool is None:
                result_text = f"error: unknown tool {call.name}"
            else:
                outcome = executor.invoke(tool, call.name, call.arguments, timeout_ms / 1000.0)
                result_text = outcome.result if outcome.ok else f"error: {outcome.stderr}"
            transcript.append(f"tool {call.name}: {result_text}")
            results.append(f"{call.name} -> {result_text}")
            if calls_done >= max_calls:
                break
        completion = gateway.complete(
            _request(
                "solve_continue",
                {"question": question.question, "tool_results": "\n".join(results)},
                role="solver",
            )
        )
        transcript.append(f"assistant: {completion.text}")
    return "\n".join(transcript), completion.text


def _sample_sources(source_ids: list[str], cap: int) -> list[str]:
    ranked = sorted(
        source_ids, key=lambda qa_id: hashlib.sha256(qa_id.encode("utf-8")).hexdigest()
    )
    return ranked[:cap]


def review_cycle(
    gateway: Gateway,
    executor,
    builds: list[SibBuild],
    source_items: list[QAItem],
    cfg: PipelineConfig,
    node_id: str,
    audit: list[dict],
) -> tuple[list[SibBuild], list[dict], int, bool]:
    """Solver-driven review loop; at most ``aggregation_max_turns`` cycles.

    Any NEED_PATCHING report feeds all suggestions into one refine call per
    SIB; on cap without all-PASS the last version is kept and flagged.
    """
    reports: list[dict] = []
    cycles = 0
    for cycle in range(1, cfg.aggregation_max_turns + 1):
        cycles = cycle
        cycle_reports = []
        aggregated_code = _render_aggregated_code(builds)
        for item in source_items:
            transcript, final = _solver_answers(
                gateway, executor, item, builds, cfg.tool_timeout_ms
            )
            bindings = {
                "question": item.question,
                "ground_truth": item.gold_answer,
                "tool_code": aggregated_code,
                "weaker_llm_message": transcript,
                "weaker_final_response": final,
            }
            completion = gateway.complete(_request("review_feedback", bindings))
            try:
                report = codec.parse_review_report(completion.text).payload
            except codec.ParseError as exc:
                report = {
                    "decision": "NEED_PATCHING",
                    "reason": f"unparseable report: {exc}",
                    "suggestions": "",
                }
            report["question_id"] = item.id
            report["cycle"] = cycle
            cycle_reports.append(report)
        reports.extend(cycle_reports)
        audit.append(
            {
                "phase": "review",
                "cycle": cycle,
                "decisions": [r["decision"] for r in cycle_reports],
            }
        )
        failing = [r for r in cycle_reports if r["decision"] != "PASS"]
        if not failing:
            return builds, reports, cycles, True
        if cycle == cfg.aggregation_max_turns:
            break
        feedback = "\n\n".join(
            f"[{r['question_id']}] {r['reason']}\n{r['suggestions']}".strip()
            for r in failing
        )
        refined: list[SibBuild] = []
        for build in builds:
            bindings = {
                "blueprint": build.blueprint_text,
                "tool_code": _render_aggregated_code([build]),
                "feedback": feedback,
            }
            completion = gateway.complete(_request("refine_codes", bindings))
            try:
                payload = codec.parse_code_artifact(completion.text).payload
                tools, error = _artifact_to_tools(payload, build.spec, node_id)
            except codec.ParseError as exc:
                payload, tools, error = None, [], str(exc)
            if error is None:
                refined.append(SibBuild(build.spec, build.blueprint_text, tools, payload))
                audit.append({"phase": "refine", "sib": build.spec.title, "ok": True})
            else:
                # keep the previous compiling version rather than regress
                refined.append(build)
                audit.append(
                    {"phase": "refine", "sib": build.spec.title, "ok": False, "error": error}
                )
        builds = refined
    return builds, reports, cycles, False


def _passthrough(cluster_tools: list[Tool], node_id: str) -> list[AggregatedTool]:
    """Graceful degradation: the originals enter the library unaggregated."""
    out = []
    for tool in sorted(cluster_tools, key=lambda t: t.tool_id):
        out.append(
            AggregatedTool.create(
                facade_name=tool.name,
                facade_code=tool.code,
                support_code="",
                description=tool.description,
                covered_tools=[tool.tool_id],
                cluster=node_id,
            )
        )
    return out


def aggregate_cluster(
    gateway: Gateway,
    executor,
    node_id: str,
    cluster_tools: list[Tool],
    source_items: list[QAItem],
    cfg: PipelineConfig,
) -> ClusterOutcome:
    audit: list[dict] = []
    gateway = _AuditingGateway(gateway, audit)
    executor = _AuditingExecutor(executor, audit)
    ordered = sorted(cluster_tools, key=lambda t: t.tool_id)
    tool_ids = [t.tool_id for t in ordered]
    try:
        blueprint = _blueprint_with_split(gateway, ordered, cfg.parse_retries)
    except AggregationError as exc:
        audit.append({"phase": "blueprint", "ok": False, "error": str(exc)})
        return ClusterOutcome(
            node_id, _passthrough(ordered, node_id), [], failed=True, audit=audit
        )
    audit.append({"phase": "blueprint", "ok": True, "n_sibs": len(blueprint.sibs)})

    builds: list[SibBuild] = []
    for sib in blueprint.sibs:
        build = _implement_sib(gateway, sib, tool_ids, node_id, cfg.syntax_fix_turns, audit)
        if build is None:
            log.warning("cluster %s: implementation never compiled; passing originals through", node_id)
            return ClusterOutcome(
                node_id, _passthrough(ordered, node_id), [], failed=True, audit=audit
            )
        builds.append(build)

    sampled_ids = _sample_sources(
        sorted({qa for t in ordered for qa in t.source_qa}), cfg.review_sample
    )
    by_id = {item.id: item for item in source_items}
    sampled_items = [by_id[qa_id] for qa_id in sampled_ids if qa_id in by_id]
    builds, reports, cycles, converged = review_cycle(
        gateway, executor, builds, sampled_items, cfg, node_id, audit
    )
    aggregated = [tool for build in builds for tool in build.tools]
    return ClusterOutcome(
        node_id,
        aggregated,
        reports,
        failed=False,
        converged=converged,
        review_cycles=cycles,
        audit=audit,
    )


def aggregate_library(
    gateway: Gateway,
    executor,
    members_by_cluster: dict[str, list[Tool]],
    cluster_sources: dict[str, list[str]],
    dataset: list[QAItem],
    n_fragmented: int,
    cfg: PipelineConfig,
    out_dir: Path | None = None,
) -> tuple[LibraryManifest, dict[str, list[AggregatedTool]], AggregationStats]:
    """Run the three steps per cluster (clusters independent, processed in
    node-id order) and assemble the manifest."""
    stats = AggregationStats()
    by_id = {item.id: item for item in dataset}
    clusters: dict[str, list[str]] = {}
    stored: dict[str, list[AggregatedTool]] = {}
    for node_id in sorted(members_by_cluster):
        members = members_by_cluster[node_id]
        if not members:
            continue
        source_items = [
            by_id[qa_id] for qa_id in cluster_sources.get(node_id, []) if qa_id in by_id
        ]
        outcome = aggregate_cluster(gateway, executor, node_id, members, source_items, cfg)
        stats.review_cycles[node_id] = outcome.review_cycles
        if outcome.failed:
            stats.failed_clusters.append(node_id)
        if not outcome.converged:
            stats.non_converged.append(node_id)
        ordered_tools = sorted(outcome.aggregated, key=lambda t: t.tool_id)
        clusters[node_id] = [t.tool_id for t in ordered_tools]
        stored[node_id] = ordered_tools
        if out_dir is not None:
            for tool in ordered_tools:
                save_aggregated_tool(out_dir, tool)
            append_audit(
                out_dir,
                node_id,
                outcome.audit
                + [{"phase": "reports", "reports": outcome.reports}],
            )
    manifest = LibraryManifest(
        clusters=clusters,
        counts={
            "n_questions": len(dataset),
            "n_fragmented_tools": n_fragmented,
            "n_library_tools": sum(len(v) for v in clusters.values()),
        },
        config_fingerprint=cfg.fingerprint(),
        failed_clusters=stats.failed_clusters,
    )
    if out_dir is not None:
        save_manifest(out_dir, manifest)
    return manifest, stored, stats
