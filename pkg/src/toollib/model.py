"""Shared domain types: QA items, tools, the cluster tree, blueprints,
aggregated tools, and the library manifest."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field

GRADING_KINDS = ("multiple_choice", "numeric", "free_text")
TOOL_STATUSES = ("draft", "validated")

DEFAULT_TREE_DEPTH = 4

_IDENT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ModelError(ValueError):
    """A domain record violates one of its invariants."""


def canonical_json(value) -> str:
    """Stable compact JSON used for hashing and on-disk records."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_id(*parts: str) -> str:
    """Content hash over an ordered tuple of text parts (length-prefixed so
    distinct tuples never collide by concatenation)."""
    h = hashlib.sha256()
    for part in parts:
        raw = part.encode("utf-8")
        h.update(str(len(raw)).encode("ascii"))
        h.update(b":")
        h.update(raw)
    return h.hexdigest()


def is_identifier(name: str) -> bool:
    return bool(_IDENT_RE.match(name))


@dataclass(frozen=True)
class QAItem:
    """One ingested question: reference reasoning trace, gold answer, grading kind."""

    id: str
    question: str
    cot: str
    gold_answer: str
    grading: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ModelError("QAItem.id must be non-empty")
        if not self.question.strip():
            raise ModelError(f"QAItem {self.id}: question must be non-empty")
        if not self.gold_answer.strip():
            raise ModelError(f"QAItem {self.id}: gold_answer must be non-empty")
        if self.grading not in GRADING_KINDS:
            raise ModelError(
                f"QAItem {self.id}: grading {self.grading!r} not one of {GRADING_KINDS}"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "cot": self.cot,
            "gold_answer": self.gold_answer,
            "grading": self.grading,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QAItem":
        try:
            return cls(
                id=str(data["id"]),
                question=str(data["question"]),
                cot=str(data.get("cot", "")),
                gold_answer=str(data["gold_answer"]),
                grading=str(data["grading"]),
            )
        except KeyError as exc:
            raise ModelError(f"QAItem record missing key {exc}") from exc


@dataclass
class Tool:
    """A question-specific tool with provenance links to its source questions."""

    tool_id: str
    name: str
    code: str
    description: str
    source_qa: list[str]
    status: str = "draft"

    def __post_init__(self) -> None:
        if not is_identifier(self.name):
            raise ModelError(f"Tool name {self.name!r} is not a legal identifier")
        if not self.source_qa:
            raise ModelError(f"Tool {self.name}: source_qa must be non-empty")
        if self.status not in TOOL_STATUSES:
            raise ModelError(f"Tool {self.name}: unknown status {self.status!r}")

    @classmethod
    def create(
        cls, name: str, code: str, description: str, source_qa: list[str]
    ) -> "Tool":
        """Build a draft with a content-hash id, stable across reruns."""
        return cls(
            tool_id=content_id(name, code),
            name=name,
            code=code,
            description=description,
            source_qa=list(source_qa),
        )

    def replaced_with(self, code: str, name: str, description: str) -> "Tool":
        """New draft carrying the same provenance (refinement replaces the code)."""
        return Tool.create(name, code, description, self.source_qa)

    def to_dict(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "name": self.name,
            "code": self.code,
            "description": self.description,
            "source_qa": list(self.source_qa),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tool":
        return cls(
            tool_id=str(data["tool_id"]),
            name=str(data["name"]),
            code=str(data["code"]),
            description=str(data.get("description", "")),
            source_qa=[str(x) for x in data["source_qa"]],
            status=str(data.get("status", "draft")),
        )


@dataclass
class ClusterNode:
    """One label-tree node; only leaves hold member tools."""

    id: str
    level: int
    parent: str | None
    children: list[str] = field(default_factory=list)
    member_tools: list[str] = field(default_factory=list)
    description: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "level": self.level,
            "parent": self.parent,
            "children": list(self.children),
            "member_tools": list(self.member_tools),
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterNode":
        return cls(
            id=str(data["id"]),
            level=int(data["level"]),
            parent=data.get("parent"),
            children=[str(c) for c in data.get("children", [])],
            member_tools=[str(t) for t in data.get("member_tools", [])],
            description=str(data.get("description", "")),
        )


class ClusterTree:
    """The evolving hierarchy of labels.

    Leaves absorbed by a merge survive as aliases: ``resolve`` maps an
    absorbed id to the leaf that took over its members.
    """

    def __init__(self, depth_cap: int = DEFAULT_TREE_DEPTH) -> None:
        self.depth_cap = depth_cap
        self.nodes: dict[str, ClusterNode] = {}
        self.aliases: dict[str, str] = {}

    def add_node(self, node: ClusterNode) -> None:
        if node.id in self.nodes:
            raise ModelError(f"duplicate node id {node.id!r}")
        self.nodes[node.id] = node

    def root(self) -> ClusterNode:
        roots = [n for n in self.nodes.values() if n.parent is None]
        if len(roots) != 1:
            raise ModelError(f"tree must have exactly one root, found {len(roots)}")
        return roots[0]

    def is_leaf(self, node_id: str) -> bool:
        node = self.nodes.get(node_id)
        return node is not None and not node.children

    def leaf_ids(self) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if not n.children)

    def resolve(self, node_id: str) -> str | None:
        """Follow alias links (absorbed leaves) to the surviving node id."""
        seen = set()
        current = node_id
        while current in self.aliases:
            if current in seen:
                return None
            seen.add(current)
            current = self.aliases[current]
        return current if current in self.nodes else None

    def validate(self) -> list[str]:
        """All structural invariants; returns human-readable violations."""
        problems: list[str] = []
        roots = [n for n in self.nodes.values() if n.parent is None]
        if len(roots) != 1:
            problems.append(f"expected exactly one root, found {len(roots)}")
        for node in self.nodes.values():
            if node.parent is not None:
                parent = self.nodes.get(node.parent)
                if parent is None:
                    problems.append(f"orphan: {node.id} (parent {node.parent!r} missing)")
                    continue
                if node.level != parent.level + 1:
                    problems.append(
                        f"level mismatch: {node.id} has level {node.level}, "
                        f"parent {parent.id} has level {parent.level}"
                    )
                if node.id not in parent.children:
                    problems.append(f"{node.id} not listed in children of {node.parent}")
            elif node.level != 0:
                problems.append(f"root {node.id} must have level 0, has {node.level}")
            if node.level > self.depth_cap:
                problems.append(
                    f"depth exceeded: {node.id} at level {node.level} > cap {self.depth_cap}"
                )
            if node.children and node.member_tools:
                problems.append(f"non-leaf {node.id} holds member tools")
            for child in node.children:
                if child not in self.nodes:
                    problems.append(f"{node.id} lists unknown child {child!r}")
        problems.extend(self._cycle_violations())
        return problems

    def _cycle_violations(self) -> list[str]:
        visited: set[str] = set()
        problems = []
        for node_id in self.nodes:
            path: set[str] = set()
            current: str | None = node_id
            while current is not None and current not in visited:
                if current in path:
                    problems.append(f"cycle through {current}")
                    break
                path.add(current)
                current = self.nodes[current].parent if current in self.nodes else None
            visited.update(path)
        return problems

    def clone(self) -> "ClusterTree":
        other = ClusterTree(self.depth_cap)
        other.nodes = copy.deepcopy(self.nodes)
        other.aliases = dict(self.aliases)
        return other

    def to_dict(self) -> dict:
        return {
            "depth_cap": self.depth_cap,
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
            "aliases": dict(sorted(self.aliases.items())),
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterTree":
        tree = cls(int(data.get("depth_cap", DEFAULT_TREE_DEPTH)))
        for node_data in data["nodes"]:
            tree.add_node(ClusterNode.from_dict(node_data))
        tree.aliases = {str(k): str(v) for k, v in data.get("aliases", {}).items()}
        return tree


@dataclass
class SIBSpec:
    """One aggregation unit of a blueprint: scenario classes plus the public
    functions that wrap a subset of the cluster's tools."""

    title: str
    description: str
    class_designs: str
    public_function_designs: str
    covered_tools: list[str]

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "description": self.description,
            "class_designs": self.class_designs,
            "public_function_designs": self.public_function_designs,
            "covered_tools": list(self.covered_tools),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SIBSpec":
        return cls(
            title=str(data["title"]),
            description=str(data.get("description", "")),
            class_designs=str(data.get("class_designs", "")),
            public_function_designs=str(data.get("public_function_designs", "")),
            covered_tools=[str(t) for t in data["covered_tools"]],
        )


@dataclass
class Blueprint:
    """Refactoring plan for one cluster; every cluster tool must be covered."""

    sibs: list[SIBSpec]

    def to_dict(self) -> dict:
        return {"sibs": [s.to_dict() for s in self.sibs]}

    @classmethod
    def from_dict(cls, data: dict) -> "Blueprint":
        return cls(sibs=[SIBSpec.from_dict(s) for s in data["sibs"]])


@dataclass
class AggregatedTool:
    """One public facade function plus the aggregate code units it depends on."""

    tool_id: str
    facade_name: str
    facade_code: str
    support_code: str
    description: str
    covered_tools: list[str]
    cluster: str

    def __post_init__(self) -> None:
        if not is_identifier(self.facade_name):
            raise ModelError(
                f"AggregatedTool facade name {self.facade_name!r} is not an identifier"
            )
        if not self.covered_tools:
            raise ModelError(
                f"AggregatedTool {self.facade_name}: covered_tools must be non-empty"
            )

    @classmethod
    def create(
        cls,
        facade_name: str,
        facade_code: str,
        support_code: str,
        description: str,
        covered_tools: list[str],
        cluster: str,
    ) -> "AggregatedTool":
        return cls(
            tool_id=content_id(facade_name, facade_code, support_code),
            facade_name=facade_name,
            facade_code=facade_code,
            support_code=support_code,
            description=description,
            covered_tools=list(covered_tools),
            cluster=cluster,
        )

    @property
    def full_code(self) -> str:
        if self.support_code.strip():
            return self.support_code.rstrip() + "\n\n\n" + self.facade_code.strip() + "\n"
        return self.facade_code.strip() + "\n"

    def to_dict(self) -> dict:
        return {
            "tool_id": self.tool_id,
            "facade_name": self.facade_name,
            "facade_code": self.facade_code,
            "support_code": self.support_code,
            "description": self.description,
            "covered_tools": list(self.covered_tools),
            "cluster": self.cluster,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AggregatedTool":
        return cls(
            tool_id=str(data["tool_id"]),
            facade_name=str(data["facade_name"]),
            facade_code=str(data["facade_code"]),
            support_code=str(data.get("support_code", "")),
            description=str(data.get("description", "")),
            covered_tools=[str(t) for t in data["covered_tools"]],
            cluster=str(data["cluster"]),
        )


@dataclass
class LibraryManifest:
    """Counts and layout of a built library; refuses inconsistent totals."""

    clusters: dict[str, list[str]]
    counts: dict[str, int]
    config_fingerprint: str
    failed_clusters: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        for key in ("n_questions", "n_fragmented_tools", "n_library_tools"):
            if key not in self.counts:
                raise ModelError(f"manifest counts missing {key!r}")
        if self.counts["n_library_tools"] > self.counts["n_fragmented_tools"]:
            raise ModelError(
                "manifest counts: n_library_tools exceeds n_fragmented_tools"
            )

    def to_dict(self) -> dict:
        return {
            "clusters": {k: list(v) for k, v in sorted(self.clusters.items())},
            "counts": dict(sorted(self.counts.items())),
            "config_fingerprint": self.config_fingerprint,
            "failed_clusters": sorted(self.failed_clusters),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LibraryManifest":
        return cls(
            clusters={str(k): [str(t) for t in v] for k, v in data["clusters"].items()},
            counts={str(k): int(v) for k, v in data["counts"].items()},
            config_fingerprint=str(data["config_fingerprint"]),
            failed_clusters=[str(c) for c in data.get("failed_clusters", [])],
        )
