"""On-disk layout for pipeline artifacts and integrity validation.

Everything is UTF-8 text with canonical key ordering, so identical inputs
produce byte-identical artifacts. The library proper is one directory per
leaf cluster with one JSON file per aggregated tool plus a manifest.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .model import (
    AggregatedTool,
    ClusterTree,
    LibraryManifest,
    ModelError,
    QAItem,
    Tool,
    canonical_json,
    is_identifier,
)
from .syntax import syntax_check

TOOLS_FILE = "tools.jsonl"
REJECTS_FILE = "rejects.jsonl"
CREATION_STATS_FILE = "creation_stats.json"
TREE_FILE = "tree.json"
TREE_CHECKPOINT_DIR = "tree_checkpoints"
ASSIGNMENTS_FILE = "assignments.json"
LIBRARY_DIR = "library"
MANIFEST_FILE = "manifest.json"
CLUSTERS_DIR = "clusters"
AUDIT_FILE = "audit.jsonl"
CATALOG_FILE = "catalog.json"
INDEX_FILE = "index.bin"
CONFIG_LOCK_FILE = "config.lock.json"
TRAJECTORIES_FILE = "trajectories.jsonl"
EVAL_REPORT_FILE = "eval_report.json"
EVAL_CSV_FILE = "eval_report.csv"


class StoreError(Exception):
    """Unreadable or corrupt artifact; the message names the file."""


@dataclass(frozen=True)
class Violation:
    record: str
    invariant: str
    detail: str = ""

    def __str__(self) -> str:
        suffix = f": {self.detail}" if self.detail else ""
        return f"{self.record} violates {self.invariant}{suffix}"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def dump_json(path: Path, data) -> None:
    write_text(path, json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def load_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StoreError(f"missing file: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise StoreError(f"corrupt JSON in {path}: {exc}") from exc


def write_jsonl(path: Path, records: list[dict]) -> None:
    write_text(path, "".join(canonical_json(r) + "\n" for r in records))


def read_jsonl(path: Path) -> list[dict]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise StoreError(f"missing file: {path}") from exc
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise StoreError(f"corrupt JSON line in {path}:{line_no}: {exc}") from exc
    return records


def load_dataset(path: str | Path) -> list[QAItem]:
    """JSON-Lines, one QA item per line; ids must be unique."""
    items = [QAItem.from_dict(r) for r in read_jsonl(Path(path))]
    seen: set[str] = set()
    for item in items:
        if item.id in seen:
            raise StoreError(f"duplicate QAItem id {item.id!r} in {path}")
        seen.add(item.id)
    return items


def save_tools(out_dir: Path, tools: list[Tool]) -> None:
    write_jsonl(out_dir / TOOLS_FILE, [t.to_dict() for t in tools])


def load_tools(out_dir: Path) -> list[Tool]:
    return [Tool.from_dict(r) for r in read_jsonl(out_dir / TOOLS_FILE)]


def save_tree(out_dir: Path, tree: ClusterTree) -> None:
    write_text(out_dir / TREE_FILE, tree.to_json() + "\n")


def save_tree_checkpoint(out_dir: Path, tree: ClusterTree, round_no: int) -> Path:
    path = out_dir / TREE_CHECKPOINT_DIR / f"tree_{round_no:04d}.json"
    write_text(path, tree.to_json() + "\n")
    return path


def load_tree(out_dir: Path) -> ClusterTree:
    return ClusterTree.from_dict(load_json(out_dir / TREE_FILE))


def save_assignments(
    out_dir: Path, assignments: dict[str, list[str]], cluster_sources: dict[str, list[str]]
) -> None:
    dump_json(
        out_dir / ASSIGNMENTS_FILE,
        {
            "assignments": {k: sorted(v) for k, v in assignments.items()},
            "cluster_sources": {k: sorted(v) for k, v in cluster_sources.items()},
        },
    )


def load_assignments(out_dir: Path) -> tuple[dict[str, list[str]], dict[str, list[str]]]:
    data = load_json(out_dir / ASSIGNMENTS_FILE)
    return data["assignments"], data["cluster_sources"]


_UNSAFE_RE = re.compile(r"[^A-Za-z0-9_-]")


def cluster_dirname(node_id: str) -> str:
    """Filesystem-safe, collision-free directory name for a leaf label."""
    sanitized = _UNSAFE_RE.sub("_", node_id)[:40]
    suffix = hashlib.sha256(node_id.encode("utf-8")).hexdigest()[:8]
    return f"{sanitized}-{suffix}"


def library_root(out_dir: Path) -> Path:
    return out_dir / LIBRARY_DIR


def save_aggregated_tool(out_dir: Path, tool: AggregatedTool) -> Path:
    path = (
        library_root(out_dir)
        / CLUSTERS_DIR
        / cluster_dirname(tool.cluster)
        / f"{tool.tool_id}.json"
    )
    dump_json(path, tool.to_dict())
    return path


def append_audit(out_dir: Path, node_id: str, events: list[dict]) -> None:
    path = library_root(out_dir) / CLUSTERS_DIR / cluster_dirname(node_id) / AUDIT_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for event in events:
            fh.write(canonical_json(event) + "\n")


def save_manifest(out_dir: Path, manifest: LibraryManifest) -> None:
    dump_json(library_root(out_dir) / MANIFEST_FILE, manifest.to_dict())


def load_manifest(out_dir: Path) -> LibraryManifest:
    try:
        return LibraryManifest.from_dict(load_json(library_root(out_dir) / MANIFEST_FILE))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StoreError):
            raise
        raise StoreError(
            f"corrupt manifest in {library_root(out_dir) / MANIFEST_FILE}: {exc}"
        ) from exc


def load_library(out_dir: Path) -> dict[str, AggregatedTool]:
    """All stored aggregated tools keyed by tool_id."""
    manifest = load_manifest(out_dir)
    tools: dict[str, AggregatedTool] = {}
    for node_id, tool_ids in manifest.clusters.items():
        for tool_id in tool_ids:
            path = (
                library_root(out_dir)
                / CLUSTERS_DIR
                / cluster_dirname(node_id)
                / f"{tool_id}.json"
            )
            try:
                tools[tool_id] = AggregatedTool.from_dict(load_json(path))
            except (KeyError, TypeError, ModelError) as exc:
                raise StoreError(f"corrupt aggregated tool in {path}: {exc}") from exc
    return tools


def write_config_lock(out_dir: Path, fingerprint: str) -> None:
    dump_json(out_dir / CONFIG_LOCK_FILE, {"config_fingerprint": fingerprint})


def check_config_lock(out_dir: Path, fingerprint: str) -> None:
    path = out_dir / CONFIG_LOCK_FILE
    if not path.exists():
        write_config_lock(out_dir, fingerprint)
        return
    stored = load_json(path).get("config_fingerprint")
    if stored != fingerprint:
        raise StoreError(
            f"config fingerprint mismatch: artifacts in {out_dir} were built with "
            f"{stored}, current config is {fingerprint}"
        )


def validate_library(out_root: str | Path) -> list[Violation]:
    """Integrity report over a built library.

    ``out_root`` is the pipeline output directory. Cross-artifact checks run
    only when the corresponding artifact exists. An empty report means every
    stored record satisfies its invariants.
    """
    out_dir = Path(out_root)
    violations: list[Violation] = []
    # lenient manifest load: a count inversion must surface as a violation,
    # not abort the whole report
    raw = load_json(library_root(out_dir) / MANIFEST_FILE)
    try:
        clusters_map = {
            str(k): [str(t) for t in v] for k, v in raw["clusters"].items()
        }
        counts = {str(k): int(v) for k, v in raw["counts"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreError(
            f"corrupt manifest in {library_root(out_dir) / MANIFEST_FILE}: {exc}"
        ) from exc

    class _ManifestView:
        clusters = clusters_map

    manifest = _ManifestView()

    stored: dict[str, AggregatedTool] = {}
    for node_id, tool_ids in manifest.clusters.items():
        for tool_id in tool_ids:
            path = (
                library_root(out_dir)
                / CLUSTERS_DIR
                / cluster_dirname(node_id)
                / f"{tool_id}.json"
            )
            try:
                record = AggregatedTool.from_dict(load_json(path))
            except StoreError as exc:
                raise exc
            except (KeyError, TypeError, ModelError) as exc:
                violations.append(
                    Violation(f"aggregated tool {tool_id}", "record well-formed", str(exc))
                )
                continue
            if record.tool_id != tool_id:
                violations.append(
                    Violation(f"file {path.name}", "tool_id matches filename", record.tool_id)
                )
            if record.tool_id in stored:
                violations.append(
                    Violation(f"aggregated tool {tool_id}", "tool_id unique")
                )
            stored[record.tool_id] = record
            if not record.covered_tools:
                violations.append(
                    Violation(f"aggregated tool {tool_id}", "covered_tools non-empty")
                )
            if record.cluster != node_id:
                violations.append(
                    Violation(
                        f"aggregated tool {tool_id}",
                        "stored under its own cluster",
                        f"record says {record.cluster}, stored in {node_id}",
                    )
                )
            report = syntax_check(record.full_code)
            if not report.ok:
                violations.append(
                    Violation(
                        f"aggregated tool {tool_id}", "code passes syntax check", report.message
                    )
                )
            if not is_identifier(record.facade_name):
                violations.append(
                    Violation(f"aggregated tool {tool_id}", "facade name is an identifier")
                )

    n_library = sum(len(v) for v in manifest.clusters.values())
    if counts.get("n_library_tools", 0) > counts.get("n_fragmented_tools", 0):
        violations.append(
            Violation("manifest counts", "n_library_tools <= n_fragmented_tools")
        )
    elif counts.get("n_library_tools") != n_library:
        violations.append(
            Violation(
                "manifest counts",
                "consistent with stored records",
                f"n_library_tools={counts.get('n_library_tools')}, stored={n_library}",
            )
        )

    tools_path = out_dir / TOOLS_FILE
    fragmented: dict[str, Tool] = {}
    if tools_path.exists():
        for record in read_jsonl(tools_path):
            try:
                tool = Tool.from_dict(record)
            except (KeyError, ModelError) as exc:
                violations.append(
                    Violation("fragmented toolset", "record well-formed", str(exc))
                )
                continue
            if tool.tool_id in fragmented:
                violations.append(
                    Violation(f"tool {tool.tool_id}", "tool_id unique")
                )
            fragmented[tool.tool_id] = tool
            if tool.status == "validated" and not syntax_check(tool.code).ok:
                violations.append(
                    Violation(f"tool {tool.tool_id}", "validated tool passes syntax check")
                )
        if counts.get("n_fragmented_tools") != len(fragmented):
            violations.append(
                Violation(
                    "manifest",
                    "counts consistent with stored records",
                    f"n_fragmented_tools={counts.get('n_fragmented_tools')}, "
                    f"stored={len(fragmented)}",
                )
            )
        for record in stored.values():
            for covered in record.covered_tools:
                if covered not in fragmented:
                    violations.append(
                        Violation(
                            f"aggregated tool {record.tool_id}",
                            "covered_tools resolve to stored tools",
                            covered,
                        )
                    )

    assignments_path = out_dir / ASSIGNMENTS_FILE
    if assignments_path.exists() and fragmented:
        assignments, _sources = load_assignments(out_dir)
        members: dict[str, set[str]] = {}
        for tool_id, leaves in assignments.items():
            for leaf in leaves:
                members.setdefault(leaf, set()).add(tool_id)
        for node_id in manifest.clusters:
            cluster_members = members.get(node_id, set())
            covered_union: set[str] = set()
            for tool_id in manifest.clusters[node_id]:
                record = stored.get(tool_id)
                if record is None:
                    continue
                extra = set(record.covered_tools) - cluster_members
                if extra:
                    violations.append(
                        Violation(
                            f"aggregated tool {tool_id}",
                            "covered_tools subset of cluster members",
                            ", ".join(sorted(extra)),
                        )
                    )
                covered_union.update(record.covered_tools)
            missing = cluster_members - covered_union
            if missing:
                violations.append(
                    Violation(
                        f"cluster {node_id}",
                        "aggregated tools cover every member",
                        ", ".join(sorted(missing)),
                    )
                )
    return violations
