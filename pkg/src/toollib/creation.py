"""Phase 1: abstract candidate tools from each question, then validate each
one by letting the solver answer with it, refining on failure."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from . import codec
from .config import PipelineConfig
from .gateway import ChatMessage, ChatRequest, Gateway
from .model import QAItem, Tool, is_identifier
from .syntax import syntax_check

log = logging.getLogger(__name__)

_DEF_RE = re.compile(r"^\s*def\s+([A-Za-z_][A-Za-z0-9_]*)\s*\(", re.M)
_DOCSTRING_RE = re.compile(r'(?:"""(.*?)"""|\'\'\'(.*?)\'\'\')', re.S)


@dataclass
class TurnRecord:
    turn: int
    trajectory: str
    decision: str
    feedback: str


@dataclass
class Rejection:
    item_id: str
    tool_name: str
    turns: list[TurnRecord]

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "tool_name": self.tool_name,
            "turns": [vars(t) for t in self.turns],
        }


@dataclass
class CreationResult:
    tools: list[Tool]
    source_map: dict[str, list[str]]
    rejects: list[Rejection]
    skipped_items: list[dict] = field(default_factory=list)
    turns_per_tool: dict[str, int] = field(default_factory=dict)

    def stats(self) -> dict:
        return {
            "n_tools": len(self.tools),
            "n_rejects": len(self.rejects),
            "n_skipped_items": len(self.skipped_items),
            "turns_per_tool": dict(sorted(self.turns_per_tool.items())),
            "max_turns_observed": max(self.turns_per_tool.values(), default=0),
        }


def _request(template_id: str, bindings: dict[str, str], role: str) -> ChatRequest:
    return ChatRequest(
        role_slot=role,
        messages=[ChatMessage("user", codec.render(template_id, bindings))],
        template_id=template_id,
        bindings=bindings,
    )


def derive_name(code: str) -> str | None:
    match = _DEF_RE.search(code)
    return match.group(1) if match else None


def derive_description(code: str) -> str:
    """First docstring paragraph, else the first leading comment line."""
    match = _DOCSTRING_RE.search(code)
    if match:
        doc = (match.group(1) or match.group(2) or "").strip()
        if doc:
            return doc.split("\n\n", 1)[0].replace("\n", " ").strip()
    for line in code.splitlines():
        stripped = line.strip()
        if stripped.startswith("#"):
            return stripped.lstrip("#").strip()
    return ""


def _draft_from_block(code: str, item: QAItem) -> Tool | None:
    name = derive_name(code)
    if name is None or not is_identifier(name):
        log.warning("item %s: tool block has no function definition; dropped", item.id)
        return None
    return Tool.create(name, code, derive_description(code), [item.id])


def abstract_tools(gateway: Gateway, item: QAItem, parse_retries: int = 2) -> list[Tool]:
    """Render the generation prompt and turn each reply block into a draft.

    The syntax gate is deliberately not applied here; drafts with broken
    code fail their first validation turn instead.
    """
    bindings = {"question": item.question, "cot": item.cot}
    last_error: Exception | None = None
    for _attempt in range(parse_retries + 1):
        completion = gateway.complete(_request("tool_generation", bindings, "general"))
        try:
            reply = codec.parse_tool_blocks(completion.text)
        except codec.ParseError as exc:
            last_error = exc
            continue
        drafts = []
        for block in reply.payload:
            draft = _draft_from_block(block["code"], item)
            if draft is not None:
                drafts.append(draft)
        return drafts
    log.warning("item %s: no tools emitted (%s)", item.id, last_error)
    return []


def _solver_trajectory(gateway: Gateway, item: QAItem, tool: Tool) -> str:
    bindings = {
        "question": item.question,
        "tools_description": f"{tool.name}: {tool.description}\n\n{tool.code}",
    }
    return gateway.complete(_request("tool_verification", bindings, "solver")).text


def _judge(gateway: Gateway, item: QAItem, tool: Tool, trajectory: str) -> tuple[str, str]:
    bindings = {
        "question": item.question,
        "cot": item.cot,
        "tool": tool.code,
        "trajectory": trajectory,
        "gold_answer": item.gold_answer,
    }
    completion = gateway.complete(_request("validation_decision", bindings, "general"))
    try:
        payload = codec.parse_decision(completion.text).payload
    except codec.ParseError as exc:
        log.warning("item %s: judge reply unparseable (%s); counted as FAIL", item.id, exc)
        return "FAIL", f"judge reply unparseable: {exc}"
    return payload["decision"], payload["feedback"]


def _refine(gateway: Gateway, item: QAItem, tool: Tool, feedback: str) -> Tool | None:
    bindings = {
        "question": item.question,
        "tools": tool.code,
        "answer": item.gold_answer,
        "evaluation_results": feedback,
    }
    completion = gateway.complete(_request("tool_refinement", bindings, "general"))
    try:
        blocks = codec.parse_tool_blocks(completion.text).payload
    except codec.ParseError as exc:
        log.warning("item %s: refinement reply unparseable (%s)", item.id, exc)
        return None
    return _draft_from_block(blocks[0]["code"], item)


def validate_and_refine(
    gateway: Gateway, tool: Tool, item: QAItem, max_turns: int = 3
) -> tuple[Tool | Rejection, int]:
    """The check-refine loop; at most ``max_turns`` solver calls per tool.

    A syntax failure consumes a turn with the interpreter message as the
    feedback; only the latest revision is kept, earlier versions survive in
    the turn log.
    """
    if max_turns < 1:
        raise ValueError("max_turns must be >= 1")
    turns: list[TurnRecord] = []
    current = tool
    for turn in range(1, max_turns + 1):
        report = syntax_check(current.code)
        if not report.ok:
            decision, feedback = "FAIL", f"syntax error: {report.message}"
            trajectory = ""
        else:
            trajectory = _solver_trajectory(gateway, item, current)
            decision, feedback = _judge(gateway, item, current, trajectory)
        turns.append(TurnRecord(turn, trajectory, decision, feedback))
        if decision == "PASS":
            current.status = "validated"
            return current, turn
        if turn < max_turns:
            evaluation = f"{feedback}\n\nTrajectory:\n{trajectory}" if trajectory else feedback
            refined = _refine(gateway, item, current, evaluation)
            if refined is not None:
                current = refined
    return Rejection(item.id, current.name, turns), max_turns


def create_for_dataset(
    gateway: Gateway, dataset: list[QAItem], cfg: PipelineConfig
) -> CreationResult:
    """Run abstraction plus validation over the whole dataset.

    Output order is deterministic: items by id, then tool position within
    the item's reply.
    """
    result = CreationResult(tools=[], source_map={}, rejects=[])
    for item in sorted(dataset, key=lambda i: i.id):
        drafts = abstract_tools(gateway, item, cfg.parse_retries)
        if not drafts:
            result.skipped_items.append({"item_id": item.id, "reason": "no tools emitted"})
            continue
        for draft in drafts:
            outcome, turns_used = validate_and_refine(
                gateway, draft, item, cfg.creation_max_turns
            )
            if isinstance(outcome, Rejection):
                result.rejects.append(outcome)
                result.turns_per_tool[f"{item.id}/{outcome.tool_name}"] = turns_used
                continue
            result.turns_per_tool[f"{item.id}/{outcome.name}"] = turns_used
            existing = result.source_map.get(outcome.tool_id)
            if existing is None:
                result.tools.append(outcome)
                result.source_map[outcome.tool_id] = list(outcome.source_qa)
            elif item.id not in existing:
                # byte-identical tool from another question: same record, merged provenance
                existing.append(item.id)
                for stored in result.tools:
                    if stored.tool_id == outcome.tool_id:
                        stored.source_qa = list(existing)
    return result
