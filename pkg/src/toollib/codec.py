"""Prompt rendering and reply parsing.

Templates live as checked-in files with ``{name}`` placeholders; literal
braces are escaped as ``{{``/``}}``. Parsers are lenient-forward: unknown
JSON keys warn, stray prose and code fences are stripped, but structural
defects raise :class:`ParseError`. Parsers only tokenize text; they never
execute embedded code.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources

from .model import Blueprint, ClusterNode, ClusterTree, SIBSpec, canonical_json

REPLY_KINDS = (
    "tool_blocks",
    "solve_trace",
    "decision",
    "cluster_tree",
    "cluster_ops",
    "assignment",
    "blueprint",
    "code_artifact",
    "review_report",
    "search_query",
    "final_answer",
)

TEMPLATE_IDS = (
    "tool_generation",
    "tool_verification",
    "tool_refinement",
    "validation_decision",
    "cluster_propose",
    "cluster_update",
    "cluster_assign",
    "blueprint_design",
    "aggregation_implement",
    "aggregation_syntax_fix",
    "review_feedback",
    "refine_codes",
    "search_query",
    "solve_round",
    "solve_continue",
)


class ParseError(Exception):
    """Reply text does not match the expected grammar."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RenderError(Exception):
    pass


@dataclass
class ParsedReply:
    kind: str
    payload: object
    warnings: list[str] = field(default_factory=list)


_PLACEHOLDER_RE = re.compile(r"(?<!\{)\{([a-z][a-z0-9_]*)\}(?!\})")
_TEMPLATE_CACHE: dict[str, str] = {}


def _load_template(template_id: str) -> str:
    cached = _TEMPLATE_CACHE.get(template_id)
    if cached is None:
        if template_id not in TEMPLATE_IDS:
            raise RenderError(f"unknown template {template_id!r}")
        ref = resources.files("toollib.templates").joinpath(f"{template_id}.txt")
        cached = ref.read_text(encoding="utf-8")
        _TEMPLATE_CACHE[template_id] = cached
    return cached


def template_placeholders(template_id: str) -> set[str]:
    return set(_PLACEHOLDER_RE.findall(_load_template(template_id)))


def render(template_id: str, bindings: dict[str, str]) -> str:
    """Substitute placeholders and unescape literal braces.

    Only the template's literal text is unescaped, so binding values pass
    through byte-for-byte.
    """
    template = _load_template(template_id)
    parts: list[str] = []
    pos = 0
    for match in _PLACEHOLDER_RE.finditer(template):
        name = match.group(1)
        if name not in bindings:
            raise RenderError(f"unbound: {name}")
        parts.append(_unescape(template[pos : match.start()]))
        parts.append(str(bindings[name]))
        pos = match.end()
    parts.append(_unescape(template[pos:]))
    return "".join(parts)


def _unescape(literal: str) -> str:
    return literal.replace("{{", "{").replace("}}", "}")


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


_FENCE_RE = re.compile(r"^```[A-Za-z0-9_+-]*[ \t]*$")


def strip_code_fences(text: str) -> str:
    """Drop markdown fence lines wrapping a block (inner fences untouched)."""
    lines = text.strip("\n").splitlines()
    while lines and _FENCE_RE.match(lines[0].strip()):
        lines = lines[1:]
    while lines and _FENCE_RE.match(lines[-1].strip()):
        lines = lines[:-1]
    return "\n".join(lines)


def _extract_json(text: str):
    """Pull the first balanced JSON object/array out of possibly-noisy text."""
    cleaned = strip_code_fences(text)
    start = None
    for i, ch in enumerate(cleaned):
        if ch in "{[":
            start = i
            break
    if start is None:
        raise ParseError("no JSON value found in reply")
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(cleaned)):
        ch = cleaned[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch in "{[":
            depth += 1
        elif ch in "}]":
            depth -= 1
            if depth == 0:
                span = cleaned[start : i + 1]
                try:
                    return json.loads(span)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"malformed JSON: {exc}") from exc
    raise ParseError("unbalanced JSON in reply", _byte_offset(cleaned, start))


def _tag_body(text: str, tag: str) -> list[tuple[str, int]]:
    """All ``<tag>…</tag>`` bodies with their start offsets; unterminated
    opening tags raise."""
    bodies: list[tuple[str, int]] = []
    open_re = re.compile(rf"<{tag}>")
    for match in open_re.finditer(text):
        close = text.find(f"</{tag}>", match.end())
        alt_close = text.find(rf"<\{tag}>", match.end())
        if close == -1 or (alt_close != -1 and alt_close < close):
            close = alt_close
        if close == -1:
            raise ParseError(
                f"unterminated <{tag}> tag", _byte_offset(text, match.start())
            )
        bodies.append((text[match.end() : close], match.start()))
    return bodies


# --- tool blocks -----------------------------------------------------------

_TOOL_OPEN_RE = re.compile(r"<tool(\d+)>")


def parse_tool_blocks(reply: str) -> ParsedReply:
    """Extract every ``<toolN><code>…</code></toolN>`` block in order."""
    warnings: list[str] = []
    blocks: list[dict] = []
    for match in _TOOL_OPEN_RE.finditer(reply):
        n = match.group(1)
        rest = reply[match.end() :]
        code_open = re.search(r"<code>", rest)
        if code_open is None:
            raise ParseError(
                f"tool block {n} missing <code>", _byte_offset(reply, match.start())
            )
        close = re.search(r"</code>|<\\code>", rest[code_open.end() :])
        if close is None:
            raise ParseError(
                "unterminated <code> tag",
                _byte_offset(reply, match.end() + code_open.start()),
            )
        body = rest[code_open.end() : code_open.end() + close.start()]
        tool_close = re.search(rf"</tool{n}>|<\\tool{n}>", rest)
        if tool_close is None:
            warnings.append(f"unclosed <tool{n}> tag")
        blocks.append({"code": strip_code_fences(body).strip("\n")})
    if not blocks:
        raise ParseError("no tools emitted")
    return ParsedReply("tool_blocks", blocks, warnings)


def serialize_tool_blocks(blocks: list[dict]) -> str:
    parts = []
    for i, block in enumerate(blocks, start=1):
        parts.append(f"<tool{i}><code>\n{block['code']}\n</code></tool{i}>")
    return "\n".join(parts)


# --- final answer / solve trace / decision ---------------------------------


def parse_final_answer(reply: str) -> ParsedReply:
    warnings: list[str] = []
    answers = _tag_body(reply, "answer")
    if not answers:
        raise ParseError("missing answer")
    if len(answers) > 1:
        warnings.append(f"{len(answers)} <answer> tags; keeping the last")
    analyses = _tag_body(reply, "analysis")
    payload = {
        "analysis": analyses[-1][0].strip() if analyses else "",
        "answer": answers[-1][0].strip(),
    }
    return ParsedReply("final_answer", payload, warnings)


def serialize_final_answer(payload: dict) -> str:
    return (
        f"<analysis>{payload.get('analysis', '')}</analysis>\n"
        f"<answer>{payload.get('answer', '')}</answer>"
    )


_TOOL_CALL_RE = re.compile(r"<tool_call name=\"([^\"]+)\">", re.S)


def parse_solve_trace(reply: str) -> ParsedReply:
    """Tool-verification style reply plus optional inline tool-call records."""
    base = parse_final_answer(reply)
    invocations: list[dict] = []
    for match in _TOOL_CALL_RE.finditer(reply):
        close = reply.find("</tool_call>", match.end())
        if close == -1:
            raise ParseError(
                "unterminated <tool_call> tag", _byte_offset(reply, match.start())
            )
        invocations.append(
            {"name": match.group(1), "arguments": reply[match.end() : close].strip()}
        )
    payload = dict(base.payload)
    payload["tool_invocations"] = invocations
    return ParsedReply("solve_trace", payload, base.warnings)


def serialize_solve_trace(payload: dict) -> str:
    calls = "".join(
        f"<tool_call name=\"{c['name']}\">{c['arguments']}</tool_call>\n"
        for c in payload.get("tool_invocations", [])
    )
    return calls + serialize_final_answer(payload)


def parse_decision(reply: str) -> ParsedReply:
    matches = _tag_body(reply, "decision")
    if not matches:
        raise ParseError("missing <decision> tag")
    token = matches[-1][0].strip().upper()
    if token not in ("PASS", "FAIL"):
        raise ParseError(f"unknown decision token {token!r}")
    feedback = _tag_body(reply, "feedback")
    payload = {
        "decision": token,
        "feedback": feedback[-1][0].strip() if feedback else "",
    }
    return ParsedReply("decision", payload)


def serialize_decision(payload: dict) -> str:
    return (
        f"<decision>{payload['decision']}</decision>\n"
        f"<feedback>{payload.get('feedback', '')}</feedback>"
    )


# --- cluster tree ----------------------------------------------------------


def parse_cluster_tree(reply: str, depth_cap: int = 4) -> ParsedReply:
    data = _extract_json(reply)
    warnings: list[str] = []
    if isinstance(data, list):
        clusters = data
        warnings.append("bare array accepted in place of {\"clusters\": ...}")
    elif isinstance(data, dict):
        clusters = data.get("clusters")
        for key in data:
            if key != "clusters":
                warnings.append(f"unknown key ignored: {key}")
        if clusters is None:
            raise ParseError("reply has no \"clusters\" array")
    else:
        raise ParseError("cluster reply must be a JSON object or array")

    known_keys = {"id", "level", "parent", "children"}
    entries: list[dict] = []
    seen: dict[str, int] = {}
    duplicates: list[str] = []
    for i, raw in enumerate(clusters):
        if not isinstance(raw, dict):
            raise ParseError(f"cluster entry {i} is not an object")
        for key in raw:
            if key not in known_keys:
                warnings.append(f"unknown key ignored: clusters[{i}].{key}")
        try:
            node_id = str(raw["id"])
            level = int(raw["level"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"cluster entry {i} missing id/level: {exc}") from exc
        if node_id in seen:
            duplicates.append(node_id)
        seen[node_id] = i
        parent = raw.get("parent")
        entries.append(
            {
                "id": node_id,
                "level": level,
                "parent": None if parent is None else str(parent),
                "children": [str(c) for c in raw.get("children") or []],
            }
        )
    if duplicates:
        raise ParseError(f"duplicate ids: {', '.join(sorted(set(duplicates)))}")

    declared = {e["id"] for e in entries}
    tree = ClusterTree(depth_cap)
    for entry in entries:
        kept_children = []
        for child in entry["children"]:
            if child in declared:
                kept_children.append(child)
            else:
                warnings.append(f"dropped undeclared child ref {child!r} of {entry['id']}")
        tree.add_node(
            ClusterNode(
                id=entry["id"],
                level=entry["level"],
                parent=entry["parent"],
                children=kept_children,
            )
        )
    # Reconcile: a declared parent link wins over an incomplete children list.
    for node in tree.nodes.values():
        if node.parent is not None and node.parent in tree.nodes:
            parent = tree.nodes[node.parent]
            if node.id not in parent.children:
                parent.children.append(node.id)
                warnings.append(f"added {node.id} to children of {node.parent}")

    problems = tree.validate()
    if problems:
        raise ParseError("; ".join(problems))
    return ParsedReply("cluster_tree", tree, warnings)


def serialize_cluster_tree(tree: ClusterTree) -> str:
    clusters = [
        {
            "id": node.id,
            "level": node.level,
            "parent": node.parent,
            "children": list(node.children),
        }
        for node in (tree.nodes[k] for k in sorted(tree.nodes))
    ]
    return canonical_json({"clusters": clusters})


# --- cluster ops -----------------------------------------------------------


def parse_cluster_ops(reply: str) -> ParsedReply:
    data = _extract_json(reply)
    warnings: list[str] = []
    if isinstance(data, list):
        operations = data
        warnings.append("bare array accepted in place of {\"operations\": ...}")
    elif isinstance(data, dict):
        operations = data.get("operations")
        if operations is None:
            raise ParseError("reply has no \"operations\" array")
    else:
        raise ParseError("operations reply must be a JSON object or array")

    ops: list[dict] = []
    for i, raw in enumerate(operations):
        if not isinstance(raw, dict):
            raise ParseError(f"operation {i} is not an object")
        action = str(raw.get("action", ""))
        if action == "ADD_NODE":
            try:
                ops.append(
                    {
                        "action": "ADD_NODE",
                        "node_id": str(raw["node_id"]),
                        "level": int(raw["level"]),
                        "parent": str(raw["parent"]),
                        "description": str(raw.get("description", "")),
                    }
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"ADD_NODE operation {i} malformed: {exc}") from exc
        elif action == "MODIFY_NODE":
            changes = raw.get("changes")
            if not isinstance(changes, dict):
                raise ParseError(f"MODIFY_NODE operation {i} missing changes object")
            add_children = []
            for key, value in changes.items():
                if key == "add_children":
                    add_children = [str(c) for c in value]
                else:
                    warnings.append(f"unknown changes key ignored: {key}")
            if "node_id" not in raw:
                raise ParseError(f"MODIFY_NODE operation {i} missing node_id")
            ops.append(
                {
                    "action": "MODIFY_NODE",
                    "node_id": str(raw["node_id"]),
                    "add_children": add_children,
                }
            )
        else:
            raise ParseError(f"unknown action {action!r} in operation {i}")
    return ParsedReply("cluster_ops", ops, warnings)


def serialize_cluster_ops(ops: list[dict]) -> str:
    out = []
    for op in ops:
        if op["action"] == "ADD_NODE":
            out.append(
                {
                    "action": "ADD_NODE",
                    "node_id": op["node_id"],
                    "level": op["level"],
                    "parent": op["parent"],
                    "description": op.get("description", ""),
                }
            )
        else:
            out.append(
                {
                    "action": "MODIFY_NODE",
                    "node_id": op["node_id"],
                    "changes": {"add_children": list(op.get("add_children", []))},
                }
            )
    return canonical_json({"operations": out})


# --- assignment ------------------------------------------------------------


def parse_assignment(reply: str) -> ParsedReply:
    warnings: list[str] = []
    try:
        data = _extract_json(reply)
    except ParseError:
        tokens = [t.strip() for t in re.split(r"[,\n]", strip_code_fences(reply))]
        leaves = [t for t in tokens if t]
        if not leaves:
            raise ParseError("no leaf ids in assignment reply")
        warnings.append("plain-text leaf list accepted in place of JSON")
        return ParsedReply("assignment", {"leaves": leaves}, warnings)
    if isinstance(data, dict):
        for key in ("leaves", "clusters"):
            if key in data:
                data = data[key]
                warnings.append(f"object wrapper {key!r} accepted")
                break
        else:
            raise ParseError("assignment object has no leaves/clusters array")
    if not isinstance(data, list) or not data:
        raise ParseError("assignment must be a non-empty array of leaf ids")
    return ParsedReply("assignment", {"leaves": [str(x) for x in data]}, warnings)


def serialize_assignment(payload: dict) -> str:
    return canonical_json(payload["leaves"])


# --- blueprint --------------------------------------------------------------

_SIB_SECTION_RE = re.compile(r"^\[([^\]]+)\]", re.M)


def parse_blueprint(reply: str, tool_ids: list[str]) -> ParsedReply:
    """One SIBSpec per <SIB> block; [Covered Tools] holds 1-based indices into
    the cluster's presentation order (``tool_ids``)."""
    warnings: list[str] = []
    blocks = _tag_body(reply, "SIB")
    if not blocks:
        raise ParseError("no <SIB> blocks in blueprint reply")

    n = len(tool_ids)
    sibs: list[SIBSpec] = []
    covered_union: set[int] = set()
    for body, _offset in blocks:
        sections: dict[str, str] = {}
        title = ""
        headers = list(_SIB_SECTION_RE.finditer(body))
        for i, header in enumerate(headers):
            name = header.group(1).strip().lower()
            end = headers[i + 1].start() if i + 1 < len(headers) else len(body)
            content = body[header.end() : end].strip().lstrip(":").strip()
            if name.startswith("sib") and "description" not in name:
                title = content.splitlines()[0].strip() if content else name
            elif "class" in name:
                sections["classes"] = content
            elif "public" in name:
                sections["functions"] = content
            elif "covered" in name:
                sections["covered"] = content
            elif "description" in name:
                sections["description"] = content
            else:
                warnings.append(f"unknown blueprint section ignored: [{header.group(1)}]")
        if not title:
            first_line = body.strip().splitlines()
            title = first_line[0].strip() if first_line else "untitled"
        covered_text = sections.get("covered", "")
        indices = [int(tok) for tok in re.findall(r"\d+", covered_text)]
        if not indices:
            raise ParseError(f"SIB {title!r} lists no covered tools")
        bad = sorted(i for i in indices if not 1 <= i <= n)
        if bad:
            raise ParseError(
                f"covered index out of range: {', '.join(str(b) for b in bad)} (cluster has {n} tools)"
            )
        covered_union.update(indices)
        sibs.append(
            SIBSpec(
                title=title,
                description=sections.get("description", ""),
                class_designs=sections.get("classes", ""),
                public_function_designs=sections.get("functions", ""),
                covered_tools=[tool_ids[i - 1] for i in sorted(set(indices))],
            )
        )
    uncovered = sorted(set(range(1, n + 1)) - covered_union)
    if uncovered:
        raise ParseError(f"uncovered: {', '.join(str(u) for u in uncovered)}")
    return ParsedReply("blueprint", Blueprint(sibs=sibs), warnings)


def serialize_blueprint(blueprint: Blueprint, tool_ids: list[str]) -> str:
    position = {tool_id: i + 1 for i, tool_id in enumerate(tool_ids)}
    parts = []
    for sib in blueprint.sibs:
        indices = ", ".join(str(position[t]) for t in sib.covered_tools)
        parts.append(
            "<SIB>\n"
            f"[SIB]{sib.title}\n"
            f"[Description]\n{sib.description}\n"
            f"[SIB Class Description]\n{sib.class_designs}\n"
            f"[Public Function Description]\n{sib.public_function_designs}\n"
            f"[Covered Tools]\n{indices}\n"
            "</SIB>"
        )
    return "\n".join(parts)


# --- code artifact -----------------------------------------------------------

_FUNCTION_OPEN_RE = re.compile(r"<function_(\d+)>")


def parse_code_artifact(reply: str) -> ParsedReply:
    start = reply.find("<code>")
    end = reply.rfind("</code>")
    if start == -1 or end == -1 or end <= start:
        raise ParseError("missing outer <code> tag")
    body = reply[start + len("<code>") : end]

    support_parts = [strip_code_fences(b).strip("\n") for b, _ in _tag_body(body, "class")]
    functions: list[dict] = []
    seen: set[int] = set()
    for match in _FUNCTION_OPEN_RE.finditer(body):
        index = int(match.group(1))
        close = body.find(f"</function_{index}>", match.end())
        if close == -1:
            raise ParseError(
                f"unterminated <function_{index}> tag", _byte_offset(body, match.start())
            )
        if index in seen:
            raise ParseError(f"duplicate function_{index}")
        seen.add(index)
        functions.append(
            {
                "index": index,
                "code": strip_code_fences(body[match.end() : close]).strip("\n"),
            }
        )
    if not functions:
        raise ParseError("no public functions emitted")
    functions.sort(key=lambda f: f["index"])
    expected = list(range(1, len(functions) + 1))
    actual = [f["index"] for f in functions]
    if actual != expected:
        missing = sorted(set(expected) - set(actual))
        raise ParseError(f"missing function_{missing[0] if missing else actual[0]}")
    payload = {
        "support_code": "\n\n\n".join(p for p in support_parts if p),
        "functions": functions,
    }
    return ParsedReply("code_artifact", payload)


def serialize_code_artifact(payload: dict) -> str:
    parts = ["<code>"]
    if payload.get("support_code"):
        parts.append(f"<class>\n{payload['support_code']}\n</class>")
    for fn in payload["functions"]:
        parts.append(f"<function_{fn['index']}>\n{fn['code']}\n</function_{fn['index']}>")
    parts.append("</code>")
    return "\n".join(parts)


# --- review report -----------------------------------------------------------


def parse_review_report(reply: str) -> ParsedReply:
    warnings: list[str] = []
    wrapped = _tag_body(reply, "final_report")
    if wrapped:
        source = wrapped[-1][0]
    else:
        source = reply
        warnings.append("missing <final_report> wrapper")
    data = _extract_json(source)
    if not isinstance(data, dict):
        raise ParseError("review report must be a JSON object")
    if "is_library_helpful" not in data:
        raise ParseError("review report missing is_library_helpful")
    decision = str(data["is_library_helpful"]).strip().upper()
    if decision not in ("PASS", "NEED_PATCHING"):
        raise ParseError(f"unknown decision token {data['is_library_helpful']!r}")
    for key in data:
        if key not in ("is_library_helpful", "reason", "modification_suggestions"):
            warnings.append(f"unknown key ignored: {key}")
    payload = {
        "decision": decision,
        "reason": str(data.get("reason", "")),
        "suggestions": str(data.get("modification_suggestions", "")),
    }
    return ParsedReply("review_report", payload, warnings)


def serialize_review_report(payload: dict) -> str:
    body = canonical_json(
        {
            "is_library_helpful": payload["decision"],
            "reason": payload.get("reason", ""),
            "modification_suggestions": payload.get("suggestions", ""),
        }
    )
    return f"<final_report>\n{body}\n</final_report>"


# --- search query -------------------------------------------------------------


def parse_search_query(reply: str) -> ParsedReply:
    warnings: list[str] = []
    tagged = [b for b, _ in _tag_body(reply, "search_query")]
    text = tagged[-1] if tagged else strip_code_fences(reply)
    query = text.strip()
    if not query:
        raise ParseError("empty search query")
    return ParsedReply("search_query", {"query": query}, warnings)


def serialize_search_query(payload: dict) -> str:
    return payload["query"]


# --- dispatcher ----------------------------------------------------------------


def parse(kind: str, reply: str, **context) -> ParsedReply:
    if kind == "tool_blocks":
        return parse_tool_blocks(reply)
    if kind == "solve_trace":
        return parse_solve_trace(reply)
    if kind == "decision":
        return parse_decision(reply)
    if kind == "cluster_tree":
        return parse_cluster_tree(reply, depth_cap=context.get("depth_cap", 4))
    if kind == "cluster_ops":
        return parse_cluster_ops(reply)
    if kind == "assignment":
        return parse_assignment(reply)
    if kind == "blueprint":
        return parse_blueprint(reply, tool_ids=context["tool_ids"])
    if kind == "code_artifact":
        return parse_code_artifact(reply)
    if kind == "review_report":
        return parse_review_report(reply)
    if kind == "search_query":
        return parse_search_query(reply)
    if kind == "final_answer":
        return parse_final_answer(reply)
    raise ParseError(f"unknown reply kind {kind!r}")
