"""Command-line entry point wiring config, phases, persistence, and reports.

Exit codes: 0 success, 1 phase failure (including missing prerequisite
artifacts), 2 config error.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import store
from .aggregation import aggregate_library
from .clustering import ClusteringError, run_phase
from .config import ConfigError, PipelineConfig, load_config
from .creation import create_for_dataset
from .gateway import (
    Gateway,
    GatewayError,
    HttpBackend,
    HttpEmbedder,
    MockEmbedder,
    ScriptedBackend,
)
from .index import build_index, knn, load_index, save_index
from .model import QAItem
from .recallbench import run_scaling
from .runtime import (
    CannedExecutor,
    EchoExecutor,
    SolveLimits,
    evaluate,
    solve,
    write_eval_report,
    write_trajectories,
)
from .schema import (
    CatalogEntry,
    ExtractError,
    build_schema,
    catalog_from_json,
    catalog_to_json,
)

EXIT_OK = 0
EXIT_PHASE = 1
EXIT_CONFIG = 2


class PhaseFailure(Exception):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PhaseFailure(f"missing {what}: expected file {path}")
    return path


def build_gateway(cfg: PipelineConfig, script: str | None) -> Gateway:
    backends = {}
    scripted = None
    for slot, role in (("general", cfg.general), ("solver", cfg.solver)):
        if role.backend == "script":
            if script is None:
                raise ConfigError(
                    f"gateway.{slot} uses the scripted backend; pass --script"
                )
            if scripted is None:
                scripted = ScriptedBackend.from_jsonl(script)
            backends[slot] = scripted
        else:
            backends[slot] = HttpBackend(role.endpoint, role.model, role.api_key_env)
    if cfg.embed_backend == "mock":
        embedder = MockEmbedder(seed=cfg.embed_seed, dim=cfg.embed_dim)
    else:
        embedder = HttpEmbedder(
            cfg.embed_endpoint, cfg.embed_model, cfg.embed_api_key_env, cfg.embed_dim
        )
    return Gateway(
        backends,
        embedder,
        retries=cfg.retries,
        backoff_s=cfg.backoff_s,
        rate_cap=cfg.rate_cap,
    )


def build_executor(cfg: PipelineConfig):
    if cfg.executor_backend == "echo":
        return EchoExecutor()
    if cfg.executor_backend == "canned":
        if not cfg.canned_results:
            raise ConfigError("executor.backend=canned requires executor.canned_results")
        return CannedExecutor.from_file(cfg.resolve_path(cfg.canned_results))
    from .sandboxclient import SandboxExecutor

    if not cfg.sandbox_cmd:
        raise ConfigError("executor.backend=sandbox requires executor.worker_cmd")
    return SandboxExecutor.from_command(cfg.sandbox_cmd, cfg.sandbox_pool)


@click.group()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--dataset", "dataset_path", type=click.Path(), default=None)
@click.option("--script", "script_path", type=click.Path(), default=None)
@click.option("--workers", type=int, default=None, help="override [pipeline] workers")
@click.option("--resume/--no-resume", default=True,
              help="reuse artifacts already present in --out")
@click.pass_context
def main(ctx, config_path, out_dir, dataset_path, script_path, workers, resume):
    """Build a structured tool library from a QA dataset and answer
    questions against it."""
    try:
        cfg = load_config(config_path)
        if workers is not None:
            cfg.workers = workers
            cfg.validate()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    ctx.obj = {
        "cfg": cfg,
        "out": Path(out_dir),
        "dataset": dataset_path,
        "script": script_path,
        "resume": resume,
    }


def _run_phase(ctx, fn) -> None:
    cfg: PipelineConfig = ctx.obj["cfg"]
    out: Path = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    try:
        store.check_config_lock(out, cfg.fingerprint())
        fn(cfg, out)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (PhaseFailure, store.StoreError, ClusteringError, GatewayError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_PHASE)
    sys.exit(EXIT_OK)


def _load_dataset(ctx) -> list[QAItem]:
    path = ctx.obj["dataset"]
    if path is None:
        raise PhaseFailure("this command needs --dataset")
    return store.load_dataset(_require(Path(path), "dataset"))


@main.command()
@click.pass_context
def create(ctx):
    """Phase 1: abstract and validate question-specific tools."""

    def run(cfg, out):
        dataset = _load_dataset(ctx)
        gateway = build_gateway(cfg, ctx.obj["script"])
        result = create_for_dataset(gateway, dataset, cfg)
        store.save_tools(out, result.tools)
        store.write_jsonl(out / store.REJECTS_FILE, [r.to_dict() for r in result.rejects])
        store.dump_json(out / store.CREATION_STATS_FILE, result.stats())
        click.echo(
            f"created {len(result.tools)} validated tools "
            f"({len(result.rejects)} rejected, {len(result.skipped_items)} items skipped)"
        )

    _run_phase(ctx, run)


@main.command()
@click.pass_context
def cluster(ctx):
    """Phase 2: propose and update the label tree, then assign tools."""

    def run(cfg, out):
        _require(out / store.TOOLS_FILE, "fragmented toolset (run `create` first)")
        tools = store.load_tools(out)
        gateway = build_gateway(cfg, ctx.obj["script"])
        tree, assignment, stats = run_phase(gateway, tools, cfg, checkpoint_dir=out)
        store.save_tree(out, tree)
        store.save_assignments(out, assignment.assignments, assignment.cluster_sources)
        store.dump_json(out / "clustering_stats.json", stats.to_dict())
        click.echo(
            f"tree has {len(tree.leaf_ids())} leaves after {stats.update_rounds} "
            f"update rounds; {len(assignment.assignments)} tools assigned"
        )

    _run_phase(ctx, run)


@main.command()
@click.pass_context
def aggregate(ctx):
    """Phase 3: blueprint, implement, and review every cluster."""

    def run(cfg, out):
        _require(out / store.TREE_FILE, "cluster checkpoint (run `cluster` first)")
        _require(out / store.ASSIGNMENTS_FILE, "assignments (run `cluster` first)")
        _require(out / store.TOOLS_FILE, "fragmented toolset (run `create` first)")
        dataset = _load_dataset(ctx)
        tools = store.load_tools(out)
        by_id = {t.tool_id: t for t in tools}
        assignments, cluster_sources = store.load_assignments(out)
        members: dict[str, list] = {}
        for tool_id, leaves in assignments.items():
            for leaf in leaves:
                members.setdefault(leaf, []).append(by_id[tool_id])
        gateway = build_gateway(cfg, ctx.obj["script"])
        executor = build_executor(cfg)
        manifest, _stored, stats = aggregate_library(
            gateway,
            executor,
            members,
            cluster_sources,
            dataset,
            n_fragmented=len(tools),
            cfg=cfg,
            out_dir=out,
        )
        store.dump_json(out / "aggregation_stats.json", stats.to_dict())
        click.echo(
            f"library holds {manifest.counts['n_library_tools']} aggregated tools "
            f"across {len(manifest.clusters)} clusters "
            f"({len(stats.failed_clusters)} failed)"
        )

    _run_phase(ctx, run)


@main.command(name="index")
@click.pass_context
def index_cmd(ctx):
    """Extract schemas and build the vector index over the library."""

    def run(cfg, out):
        _require(store.library_root(out) / store.MANIFEST_FILE,
                 "library manifest (run `aggregate` first)")
        library = store.load_library(out)
        gateway = build_gateway(cfg, ctx.obj["script"])
        entries = []
        for tool in library.values():
            try:
                entries.append(CatalogEntry(tool_id=tool.tool_id, schema=build_schema(tool)))
            except ExtractError as exc:
                # passthrough originals may fall outside the facade grammar;
                # they stay in the library but out of the retrieval catalog
                click.echo(f"warning: {tool.facade_name} not indexable: {exc}", err=True)
        store.write_text(out / store.CATALOG_FILE, catalog_to_json(entries))
        vector_index = build_index(entries, gateway.embedder)
        save_index(vector_index, out / store.INDEX_FILE)
        click.echo(f"indexed {len(vector_index)} catalog entries (dim {vector_index.dim})")

    _run_phase(ctx, run)


def _load_runtime_artifacts(cfg, out, ctx):
    _require(out / store.CATALOG_FILE, "schema catalog (run `index` first)")
    _require(out / store.INDEX_FILE, "vector index (run `index` first)")
    library = store.load_library(out)
    entries = catalog_from_json((out / store.CATALOG_FILE).read_text(encoding="utf-8"))
    catalog = {e.tool_id: e for e in entries}
    vector_index = load_index(out / store.INDEX_FILE)
    gateway = build_gateway(cfg, ctx.obj["script"])
    executor = build_executor(cfg)
    limits = SolveLimits(cfg.max_tool_calls, cfg.max_retrievals)
    return gateway, vector_index, library, catalog, executor, limits


@main.command(name="solve")
@click.option("--item-id", default=None, help="dataset item to solve")
@click.option("--question", default=None, help="free-form question text")
@click.pass_context
def solve_cmd(ctx, item_id, question):
    """Answer one question with retrieval and tool execution."""

    def run(cfg, out):
        gateway, vector_index, library, catalog, executor, limits = (
            _load_runtime_artifacts(cfg, out, ctx)
        )
        if item_id is not None:
            dataset = _load_dataset(ctx)
            matches = [i for i in dataset if i.id == item_id]
            if not matches:
                raise PhaseFailure(f"item {item_id!r} not in dataset")
            item = matches[0]
        elif question is not None:
            item = QAItem(
                id="adhoc", question=question, cot="", gold_answer="?",
                grading="free_text",
            )
        else:
            raise PhaseFailure("pass --item-id or --question")
        trajectory = solve(
            gateway, vector_index, library, catalog, executor, item, limits,
            k=cfg.knn_k, timeout_s=cfg.tool_timeout_ms / 1000.0,
        )
        for step in trajectory.steps:
            click.echo(f"{step.kind}: {step.payload}")
        click.echo(f"answer: {trajectory.final_answer}")

    _run_phase(ctx, run)


@main.command(name="eval")
@click.pass_context
def eval_cmd(ctx):
    """Solve and grade the whole dataset; writes trajectories and reports."""

    def run(cfg, out):
        dataset = _load_dataset(ctx)
        gateway, vector_index, library, catalog, executor, limits = (
            _load_runtime_artifacts(cfg, out, ctx)
        )
        report = evaluate(
            gateway, vector_index, library, catalog, executor, dataset, limits,
            k=cfg.knn_k, timeout_s=cfg.tool_timeout_ms / 1000.0,
        )
        write_trajectories(out / store.TRAJECTORIES_FILE, report.trajectories)
        write_eval_report(
            out / store.EVAL_REPORT_FILE, out / store.EVAL_CSV_FILE, report
        )
        click.echo(f"accuracy={report.accuracy:.4f} over {len(report.per_item)} items")

    _run_phase(ctx, run)


@main.command()
@click.pass_context
def stats(ctx):
    """Manifest counts and the fragmented-to-library compression ratio."""

    def run(cfg, out):
        manifest = store.load_manifest(out)
        counts = manifest.counts
        ratio = (
            counts["n_fragmented_tools"] / counts["n_library_tools"]
            if counts["n_library_tools"]
            else 0.0
        )
        click.echo(
            f"n_questions={counts['n_questions']} "
            f"n_fragmented={counts['n_fragmented_tools']} "
            f"n_library={counts['n_library_tools']} "
            f"ratio={ratio:.1f}x"
        )
        if manifest.failed_clusters:
            click.echo(f"failed_clusters={','.join(manifest.failed_clusters)}")

    _run_phase(ctx, run)


@main.command()
@click.pass_context
def validate(ctx):
    """Integrity report over the stored library."""

    def run(cfg, out):
        violations = store.validate_library(out)
        for violation in violations:
            click.echo(str(violation))
        if violations:
            raise PhaseFailure(f"{len(violations)} integrity violations")
        click.echo("library is consistent")

    _run_phase(ctx, run)


@main.command(name="recall-bench")
@click.option("--scales", default="1000,5000,10000,20000", show_default=True)
@click.option("--bench-seed", type=int, default=None,
              help="suite seed (defaults to [pipeline] rng_seed)")
@click.option("--queries", "n_queries", type=int, default=300, show_default=True)
@click.pass_context
def recall_bench(ctx, scales, bench_seed, n_queries):
    """Retrieval-scaling benchmark on the synthetic distractor suite."""

    def run(cfg, out):
        # only the embedder is needed here, so no script file is required
        if cfg.embed_backend == "mock":
            embedder = MockEmbedder(seed=cfg.embed_seed, dim=cfg.embed_dim)
        else:
            embedder = HttpEmbedder(
                cfg.embed_endpoint, cfg.embed_model, cfg.embed_api_key_env, cfg.embed_dim
            )
        scale_list = [int(s) for s in scales.split(",") if s.strip()]
        seed = cfg.rng_seed if bench_seed is None else bench_seed
        rows = run_scaling(
            scale_list, seed, embedder, k=cfg.knn_k,
            n_queries=n_queries, out_dir=out / "recall",
        )
        for row in rows:
            click.echo(
                f"scale={row['scale']} fragmented={row['fragmented_recall']:.3f} "
                f"aggregated={row['aggregated_recall']:.3f}"
            )

    _run_phase(ctx, run)


if __name__ == "__main__":
    main()
