"""Phase 2: propose a depth-bounded label tree from seed tools, update it in
batches, then assign every tool to leaf cluster(s)."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .config import PipelineConfig
from .gateway import ChatMessage, ChatRequest, Gateway, UnscriptedRequestError
from .model import ClusterNode, ClusterTree, Tool
from .store import save_tree_checkpoint

log = logging.getLogger(__name__)


class ClusteringError(Exception):
    pass


@dataclass
class AssignmentResult:
    assignments: dict[str, list[str]]
    cluster_sources: dict[str, list[str]]
    fallbacks: list[str] = field(default_factory=list)


@dataclass
class PhaseStats:
    update_rounds: int = 0
    rejected_batches: int = 0
    fallback_assignments: int = 0

    def to_dict(self) -> dict:
        return vars(self).copy()


def _request(template_id: str, bindings: dict[str, str]) -> ChatRequest:
    return ChatRequest(
        role_slot="general",
        messages=[ChatMessage("user", codec.render(template_id, bindings))],
        template_id=template_id,
        bindings=bindings,
    )


def render_tool_list(tools: list[Tool]) -> str:
    return "\n".join(
        f"[{i}] {tool.name}: {tool.description}" for i, tool in enumerate(tools, start=1)
    )


def propose_clusters(
    gateway: Gateway, seed_tools: list[Tool], depth: int = 4, retries: int = 2
) -> ClusterTree:
    if not seed_tools:
        raise ClusteringError("cannot propose clusters from an empty seed set")
    bindings = {"cluster_depth": str(depth), "tool_lst": render_tool_list(seed_tools)}
    errors: list[str] = []
    for _attempt in range(retries + 1):
        completion = gateway.complete(_request("cluster_propose", bindings))
        try:
            return codec.parse_cluster_tree(completion.text, depth_cap=depth).payload
        except codec.ParseError as exc:
            errors.append(str(exc))
    raise ClusteringError(
        "cluster proposal failed after retries: " + "; ".join(errors)
    )


def apply_ops(tree: ClusterTree, ops: list[dict]) -> tuple[ClusterTree, list[str]]:
    """Apply ADD_NODE/MODIFY_NODE transactionally.

    Any invalid op rejects the whole batch and returns the original tree
    untouched. MODIFY_NODE's add_children creates unknown ids as fresh
    leaves; naming an existing leaf absorbs it into the modified node
    (alias + member transfer), which is how leaf merges are expressed.
    """
    candidate = tree.clone()
    warnings: list[str] = []
    try:
        for op in ops:
            if op["action"] == "ADD_NODE":
                _apply_add(candidate, op)
            else:
                _apply_modify(candidate, op)
    except ClusteringError as exc:
        return tree, [f"batch rejected: {exc}"]
    problems = candidate.validate()
    if problems:
        return tree, [f"batch rejected: {'; '.join(problems)}"]
    return candidate, warnings


def _apply_add(tree: ClusterTree, op: dict) -> None:
    parent = tree.nodes.get(op["parent"])
    if parent is None:
        raise ClusteringError(f"ADD_NODE {op['node_id']}: unknown parent {op['parent']!r}")
    if op["node_id"] in tree.nodes:
        raise ClusteringError(f"ADD_NODE {op['node_id']}: node already exists")
    level = parent.level + 1
    if op["level"] != level:
        raise ClusteringError(
            f"ADD_NODE {op['node_id']}: declared level {op['level']} != parent level + 1"
        )
    if level > tree.depth_cap:
        raise ClusteringError(f"ADD_NODE {op['node_id']}: depth cap exceeded")
    if parent.member_tools:
        raise ClusteringError(
            f"ADD_NODE {op['node_id']}: parent {parent.id} holds member tools"
        )
    tree.add_node(
        ClusterNode(
            id=op["node_id"],
            level=level,
            parent=parent.id,
            description=op.get("description", ""),
        )
    )
    parent.children.append(op["node_id"])


def _apply_modify(tree: ClusterTree, op: dict) -> None:
    node = tree.nodes.get(op["node_id"])
    if node is None:
        raise ClusteringError(f"MODIFY_NODE: unknown node {op['node_id']!r}")
    for child_id in op.get("add_children", []):
        existing = tree.nodes.get(child_id)
        if existing is None:
            if node.member_tools:
                raise ClusteringError(
                    f"MODIFY_NODE {node.id}: cannot grow children under a populated leaf"
                )
            level = node.level + 1
            if level > tree.depth_cap:
                raise ClusteringError(f"MODIFY_NODE {node.id}: depth cap exceeded")
            tree.add_node(
                ClusterNode(id=child_id, level=level, parent=node.id)
            )
            node.children.append(child_id)
        elif not existing.children and not node.children:
            # merge: absorb the named leaf into this one
            _absorb_leaf(tree, survivor=node, absorbed=existing)
        else:
            raise ClusteringError(
                f"MODIFY_NODE {node.id}: child {child_id!r} already exists and "
                "is not a mergeable leaf"
            )


def _absorb_leaf(tree: ClusterTree, survivor: ClusterNode, absorbed: ClusterNode) -> None:
    if survivor.id == absorbed.id:
        raise ClusteringError(f"cannot merge {survivor.id} into itself")
    survivor.member_tools.extend(
        t for t in absorbed.member_tools if t not in survivor.member_tools
    )
    if absorbed.parent is not None:
        parent = tree.nodes[absorbed.parent]
        parent.children = [c for c in parent.children if c != absorbed.id]
    del tree.nodes[absorbed.id]
    tree.aliases = {
        k: (survivor.id if v == absorbed.id else v) for k, v in tree.aliases.items()
    }
    tree.aliases[absorbed.id] = survivor.id


def run_update_round(
    gateway: Gateway, tree: ClusterTree, batch: list[Tool]
) -> tuple[ClusterTree, list[str]]:
    bindings = {
        "current_hierarchy": codec.serialize_cluster_tree(tree),
        "tool_lst": render_tool_list(batch),
    }
    completion = gateway.complete(_request("cluster_update", bindings))
    try:
        ops = codec.parse_cluster_ops(completion.text).payload
    except codec.ParseError as exc:
        return tree, [f"batch rejected: unparseable ops ({exc})"]
    if not ops:
        return tree, []
    return apply_ops(tree, ops)


def render_leaf_labels(tree: ClusterTree) -> str:
    lines = []
    for leaf_id in tree.leaf_ids():
        node = tree.nodes[leaf_id]
        suffix = f": {node.description}" if node.description else ""
        lines.append(f"- {leaf_id}{suffix}")
    return "\n".join(lines)


def _leaves_under(tree: ClusterTree, node_id: str) -> list[str]:
    node = tree.nodes.get(node_id)
    if node is None:
        return []
    if not node.children:
        return [node.id]
    out: list[str] = []
    for child in node.children:
        out.extend(_leaves_under(tree, child))
    return sorted(out)


def _fallback_leaf(
    gateway: Gateway, tree: ClusterTree, tool: Tool, candidates: list[str]
) -> str:
    """Nearest leaf by embedding similarity between the tool text and leaf
    labels, restricted to ``candidates`` when the reply pointed inside the
    tree."""
    if not candidates:
        candidates = tree.leaf_ids()
    texts = [tool.name + ": " + tool.description]
    for leaf_id in candidates:
        node = tree.nodes[leaf_id]
        texts.append(f"{leaf_id} {node.description}".strip())
    vectors = gateway.embed(texts)
    scores = vectors[1:] @ vectors[0]
    best = int(np.argmax(scores))  # argmax takes the first (id-sorted) on ties
    return candidates[best]


def _parse_assignment_reply(
    tree: ClusterTree, text: str
) -> tuple[list[str], list[str]]:
    """Valid leaf ids (aliases resolved) and the raw names that missed."""
    reply = codec.parse_assignment(text)
    valid: list[str] = []
    invalid: list[str] = []
    for raw in reply.payload["leaves"]:
        resolved = tree.resolve(raw)
        if resolved is not None and tree.is_leaf(resolved):
            if resolved not in valid:
                valid.append(resolved)
        else:
            invalid.append(raw)
    return valid, invalid


def assign_tools(
    gateway: Gateway, tree: ClusterTree, tools: list[Tool]
) -> AssignmentResult:
    """Assign every tool to at least one existing leaf against a frozen tree.

    An invalid reply is retried once; persistent misses fall back to the
    nearest-label leaf (constrained under a named internal node when the
    reply pointed at one)."""
    result = AssignmentResult(assignments={}, cluster_sources={})
    leaf_lines = render_leaf_labels(tree)
    for tool in sorted(tools, key=lambda t: t.tool_id):
        bindings = {
            "leaf_labels": leaf_lines,
            "tool": f"{tool.name}: {tool.description}\n{tool.code}",
        }
        leaves: list[str] = []
        invalid: list[str] = []
        try:
            completion = gateway.complete(_request("cluster_assign", bindings))
            leaves, invalid = _parse_assignment_reply(tree, completion.text)
        except (codec.ParseError, UnscriptedRequestError) as exc:
            invalid = [f"<unparseable: {exc}>"]
        if not leaves:
            # one retry, then the embedding fallback
            retry_leaves: list[str] = []
            try:
                completion = gateway.complete(_request("cluster_assign", bindings))
                retry_leaves, invalid = _parse_assignment_reply(tree, completion.text)
            except (codec.ParseError, UnscriptedRequestError):
                pass
            leaves = retry_leaves
        if not leaves:
            candidates: list[str] = []
            for raw in invalid:
                under = _leaves_under(tree, raw)
                candidates.extend(u for u in under if u not in candidates)
            chosen = _fallback_leaf(gateway, tree, tool, candidates)
            leaves = [chosen]
            result.fallbacks.append(tool.tool_id)
            log.warning("tool %s: assignment fell back to %s", tool.name, chosen)
        result.assignments[tool.tool_id] = leaves
        for leaf in leaves:
            node = tree.nodes[leaf]
            if tool.tool_id not in node.member_tools:
                node.member_tools.append(tool.tool_id)
            sources = result.cluster_sources.setdefault(leaf, [])
            for qa_id in tool.source_qa:
                if qa_id not in sources:
                    sources.append(qa_id)
    for leaf, sources in result.cluster_sources.items():
        result.cluster_sources[leaf] = sorted(sources)
    return result


def run_phase(
    gateway: Gateway,
    tools: list[Tool],
    cfg: PipelineConfig,
    checkpoint_dir: Path | None = None,
) -> tuple[ClusterTree, AssignmentResult, PhaseStats]:
    """Seed-propose, batch-update (checkpointing after every round), then
    assign against the final tree."""
    stats = PhaseStats()
    ordered = sorted(tools, key=lambda t: t.tool_id)
    rng = random.Random(cfg.rng_seed)
    seed_count = min(cfg.seed_size, len(ordered))
    seed_tools = rng.sample(ordered, seed_count) if ordered else []
    seed_ids = {t.tool_id for t in seed_tools}
    remaining = [t for t in ordered if t.tool_id not in seed_ids]

    tree = propose_clusters(gateway, seed_tools, cfg.tree_depth, cfg.parse_retries)
    if checkpoint_dir is not None:
        save_tree_checkpoint(checkpoint_dir, tree, 0)

    for start in range(0, len(remaining), cfg.batch_size):
        if stats.update_rounds >= cfg.max_update_rounds:
            log.warning("update round cap reached; %d tools left unseen by updates",
                        len(remaining) - start)
            break
        batch = remaining[start : start + cfg.batch_size]
        tree, warnings = run_update_round(gateway, tree, batch)
        stats.update_rounds += 1
        if warnings:
            stats.rejected_batches += 1
            for message in warnings:
                log.warning("update round %d: %s", stats.update_rounds, message)
        if checkpoint_dir is not None:
            save_tree_checkpoint(checkpoint_dir, tree, stats.update_rounds)

    assignment = assign_tools(gateway, tree, ordered)
    stats.fallback_assignments = len(assignment.fallbacks)
    return tree, assignment, stats
