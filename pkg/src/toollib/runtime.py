"""Tool-augmented question answering: query generation, retrieval, tool
execution through a pluggable executor, answer extraction, and grading."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from . import codec
from .gateway import ChatMessage, ChatRequest, Gateway
from .index import VectorIndex, knn
from .model import AggregatedTool, QAItem, canonical_json
from .schema import CatalogEntry

log = logging.getLogger(__name__)

NO_ANSWER = "no-answer"
SEARCH_TOOL_NAME = "search_tools"


@dataclass(frozen=True)
class ExecResult:
    ok: bool
    result: str
    stderr: str = ""


class Executor(Protocol):
    """Runs a tool function with JSON-text arguments; total under timeout."""

    def invoke(
        self, tool, function_name: str, arguments: str, timeout_s: float
    ) -> ExecResult: ...


class EchoExecutor:
    """Echoes arguments back; used to test argument transport."""

    def invoke(self, tool, function_name, arguments, timeout_s):
        return ExecResult(ok=True, result=f"{function_name}({arguments})")


class CannedExecutor:
    """Replays recorded results keyed by (function name, canonical arguments).

    The canned file maps ``sha256(name + "\\n" + canonical-args-json)`` to the
    result text, so fixture runs reproduce real execution output exactly.
    """

    def __init__(self, table: dict[str, str]) -> None:
        self._table = table

    @classmethod
    def from_file(cls, path: str | Path) -> "CannedExecutor":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @staticmethod
    def key(function_name: str, arguments: str) -> str:
        import hashlib

        try:
            canonical = canonical_json(json.loads(arguments))
        except json.JSONDecodeError:
            canonical = arguments
        return hashlib.sha256(
            f"{function_name}\n{canonical}".encode("utf-8")
        ).hexdigest()

    def invoke(self, tool, function_name, arguments, timeout_s):
        entry = self._table.get(self.key(function_name, arguments))
        if entry is None:
            return ExecResult(
                ok=False, result="", stderr=f"no canned result for {function_name}"
            )
        return ExecResult(ok=True, result=entry)


@dataclass
class TrajectoryStep:
    kind: str  # search | retrieved | tool_call | tool_result | answer
    payload: dict

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": self.payload}


@dataclass
class Trajectory:
    question_id: str
    steps: list[TrajectoryStep] = field(default_factory=list)
    final_answer: str = ""
    correct: bool | None = None

    def validate(self) -> None:
        answers = [s for s in self.steps if s.kind == "answer"]
        if len(answers) != 1:
            raise ValueError(
                f"trajectory {self.question_id}: expected exactly one answer step, "
                f"found {len(answers)}"
            )
        for i, step in enumerate(self.steps):
            if step.kind == "tool_result":
                if i == 0 or self.steps[i - 1].kind != "tool_call":
                    raise ValueError(
                        f"trajectory {self.question_id}: tool_result at {i} does not "
                        "follow a tool_call"
                    )

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "correct": self.correct,
        }


@dataclass
class SolveLimits:
    max_tool_calls: int = 8
    max_retrievals: int = 2

    def validate(self) -> None:
        if self.max_tool_calls < 1 or self.max_retrievals < 1:
            raise ValueError("solve limits must be >= 1")


def _request(template_id: str, bindings: dict[str, str], role: str) -> ChatRequest:
    return ChatRequest(
        role_slot=role,
        messages=[ChatMessage("user", codec.render(template_id, bindings))],
        template_id=template_id,
        bindings=bindings,
    )


def generate_search_query(gateway: Gateway, question: str) -> str:
    """One gateway call; an empty or whitespace reply falls back to the
    question text itself."""
    return _search_query(gateway, question)[0]


def _search_query(gateway: Gateway, question: str) -> tuple[str, bool]:
    completion = gateway.complete(
        _request("search_query", {"question": question}, "solver")
    )
    try:
        query = codec.parse_search_query(completion.text).payload["query"]
    except codec.ParseError:
        log.warning("empty search query reply; falling back to the question text")
        return question, False
    return query, True


def _render_candidates(candidates: list[CatalogEntry]) -> str:
    return json.dumps(
        [entry.schema.to_function_call_format() for entry in candidates],
        indent=2,
        ensure_ascii=False,
    )


def solve(
    gateway: Gateway,
    index: VectorIndex,
    library: dict[str, AggregatedTool],
    catalog: dict[str, CatalogEntry],
    executor: Executor,
    item: QAItem,
    limits: SolveLimits,
    k: int = 5,
    timeout_s: float = 10.0,
) -> Trajectory:
    """Retrieval round one is always forced; afterwards the solver may call
    tools or search again until it answers or exhausts its budgets.

    Tool failures flow back as tool results; running out of budget yields a
    ``no-answer`` step graded incorrect.
    """
    limits.validate()
    trajectory = Trajectory(question_id=item.id)
    query, explicit = _search_query(gateway, item.question)
    if explicit:
        trajectory.steps.append(TrajectoryStep("search", {"query": query}))
    retrievals_used = 1
    hits = knn(index, query, k, gateway.embedder)
    trajectory.steps.append(TrajectoryStep("retrieved", {"query": query, "hits": hits}))
    candidates = [catalog[h["tool_id"]] for h in hits if h["tool_id"] in catalog]

    tool_calls_used = 0
    rounds = 0
    max_rounds = limits.max_tool_calls + limits.max_retrievals
    completion = gateway.complete(
        _request(
            "solve_round",
            {"question": item.question, "tools_json": _render_candidates(candidates)},
            "solver",
        )
    )
    rounds += 1
    while True:
        if completion.tool_calls:
            results: list[str] = []
            out_of_budget = False
            for call in completion.tool_calls:
                if call.name == SEARCH_TOOL_NAME:
                    if retrievals_used >= limits.max_retrievals:
                        results.append(f"{SEARCH_TOOL_NAME} -> error: retrieval budget exhausted")
                        continue
                    retrievals_used += 1
                    try:
                        new_query = str(json.loads(call.arguments).get("query", ""))
                    except json.JSONDecodeError:
                        new_query = call.arguments.strip()
                    if not new_query:
                        new_query = item.question
                    trajectory.steps.append(TrajectoryStep("search", {"query": new_query}))
                    hits = knn(index, new_query, k, gateway.embedder)
                    trajectory.steps.append(
                        TrajectoryStep("retrieved", {"query": new_query, "hits": hits})
                    )
                    candidates = [
                        catalog[h["tool_id"]] for h in hits if h["tool_id"] in catalog
                    ]
                    results.append(f"{SEARCH_TOOL_NAME} -> {_render_candidates(candidates)}")
                    continue
                if tool_calls_used >= limits.max_tool_calls:
                    out_of_budget = True
                    break
                tool_calls_used += 1
                trajectory.steps.append(
                    TrajectoryStep(
                        "tool_call", {"name": call.name, "arguments": call.arguments}
                    )
                )
                entry = next(
                    (c for c in candidates if c.schema.name == call.name), None
                )
                tool = library.get(entry.tool_id) if entry else None
                if tool is None:
                    outcome = ExecResult(
                        ok=False, result="", stderr=f"unknown tool {call.name}"
                    )
                else:
                    outcome = executor.invoke(tool, call.name, call.arguments, timeout_s)
                result_text = outcome.result if outcome.ok else f"error: {outcome.stderr}"
                trajectory.steps.append(
                    TrajectoryStep(
                        "tool_result",
                        {"name": call.name, "ok": outcome.ok, "result": result_text},
                    )
                )
                results.append(f"{call.name} -> {result_text}")
            if out_of_budget or rounds >= max_rounds:
                break
            completion = gateway.complete(
                _request(
                    "solve_continue",
                    {"question": item.question, "tool_results": "\n".join(results)},
                    "solver",
                )
            )
            rounds += 1
            continue
        # a plain text reply: either an answer or a malformed round
        try:
            payload = codec.parse_final_answer(completion.text).payload
            trajectory.steps.append(TrajectoryStep("answer", {"answer": payload["answer"]}))
            trajectory.final_answer = payload["answer"]
            return trajectory
        except codec.ParseError:
            tool_calls_used += 1  # malformed rounds burn tool budget so loops stay bounded
            if tool_calls_used >= limits.max_tool_calls or rounds >= max_rounds:
                break
            completion = gateway.complete(
                _request(
                    "solve_continue",
                    {"question": item.question, "tool_results": "(no new results)"},
                    "solver",
                )
            )
            rounds += 1
    trajectory.steps.append(TrajectoryStep("answer", {"answer": NO_ANSWER}))
    trajectory.final_answer = NO_ANSWER
    return trajectory


@dataclass(frozen=True)
class GradeResult:
    correct: bool
    reason: str = ""


_NUMBER_RE = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?(?:[eE][-+]?\d+)?")
_PUNCT_STRIP = ".,;:!?()[]{}\"'"


def _normalize_choice(text: str) -> str:
    return text.strip().strip(_PUNCT_STRIP).strip().casefold()


def _normalize_free_text(text: str) -> str:
    return " ".join(text.strip().strip(_PUNCT_STRIP).casefold().split())


def _last_number(text: str) -> float | None:
    matches = _NUMBER_RE.findall(text)
    if not matches:
        return None
    try:
        return float(matches[-1].replace(",", ""))
    except ValueError:
        return None


def grade(answer: str, item: QAItem) -> GradeResult:
    """Deterministic grading per question kind.

    multiple_choice: punctuation/case-stripped exact match. numeric: last
    number in the answer within 1e-4 relative or 1e-6 absolute of the gold
    value. free_text: whitespace-collapsed case-folded equality.
    """
    if answer == NO_ANSWER:
        return GradeResult(False, "no answer produced")
    if item.grading == "multiple_choice":
        if _normalize_choice(answer) == _normalize_choice(item.gold_answer):
            return GradeResult(True)
        return GradeResult(False, "choice mismatch")
    if item.grading == "numeric":
        got = _last_number(answer)
        if got is None:
            return GradeResult(False, "no numeric token")
        want = _last_number(item.gold_answer)
        if want is None:
            return GradeResult(False, "gold answer not numeric")
        if abs(got - want) <= 1e-6 or abs(got - want) <= 1e-4 * abs(want):
            return GradeResult(True)
        return GradeResult(False, f"{got} != {want}")
    if _normalize_free_text(answer) == _normalize_free_text(item.gold_answer):
        return GradeResult(True)
    return GradeResult(False, "text mismatch")


@dataclass
class EvalReport:
    accuracy: float
    trajectories: list[Trajectory]
    per_item: list[dict]


def evaluate(
    gateway: Gateway,
    index: VectorIndex,
    library: dict[str, AggregatedTool],
    catalog: dict[str, CatalogEntry],
    executor: Executor,
    dataset: list[QAItem],
    limits: SolveLimits,
    k: int = 5,
    timeout_s: float = 10.0,
) -> EvalReport:
    trajectories: list[Trajectory] = []
    per_item: list[dict] = []
    correct = 0
    for item in sorted(dataset, key=lambda i: i.id):
        trajectory = solve(
            gateway, index, library, catalog, executor, item, limits, k, timeout_s
        )
        result = grade(trajectory.final_answer, item)
        trajectory.correct = result.correct
        correct += int(result.correct)
        trajectories.append(trajectory)
        per_item.append(
            {
                "id": item.id,
                "answer": trajectory.final_answer,
                "correct": result.correct,
                "reason": result.reason,
            }
        )
    accuracy = correct / len(dataset) if dataset else 0.0
    return EvalReport(accuracy=accuracy, trajectories=trajectories, per_item=per_item)


def write_trajectories(path: Path, trajectories: list[Trajectory]) -> None:
    """JSON-Lines trajectory log, one step per line."""
    lines = []
    for trajectory in trajectories:
        for i, step in enumerate(trajectory.steps):
            lines.append(
                canonical_json(
                    {
                        "question_id": trajectory.question_id,
                        "step_index": i,
                        "kind": step.kind,
                        "payload": step.payload,
                    }
                )
            )
        lines.append(
            canonical_json(
                {
                    "question_id": trajectory.question_id,
                    "step_index": len(trajectory.steps),
                    "kind": "verdict",
                    "payload": {
                        "final_answer": trajectory.final_answer,
                        "correct": trajectory.correct,
                    },
                }
            )
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_eval_report(json_path: Path, csv_path: Path, report: EvalReport) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(
        json.dumps(
            {
                "accuracy": report.accuracy,
                "n_items": len(report.per_item),
                "per_item": report.per_item,
            },
            indent=2,
            sort_keys=True,
            ensure_ascii=False,
        )
        + "\n",
        encoding="utf-8",
    )
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "answer", "correct", "reason"])
        writer.writeheader()
        writer.writerows(report.per_item)
