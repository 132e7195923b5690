"""Retrieval-scaling benchmark on a seeded synthetic distractor suite.

Catalogs are nested across scale points (a larger scale strictly extends a
smaller one) and the query set is fixed, so fragmented recall@k is
non-increasing in scale by construction, not just statistically. Each tool
family holds many near-duplicate question-specific entries plus one merged
counterpart carrying the family topic.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

from .index import build_index, measure_recall
from .schema import CatalogEntry, ToolSchema

_SYLLABLES = (
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne",
    "or", "pa", "qui", "ra", "su", "ta", "ul", "vo", "wa", "xe",
)


def _word(rng: random.Random) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(3))


@dataclass
class RecallSuite:
    scales: list[int]
    fragmented: dict[int, list[CatalogEntry]]
    aggregated: list[CatalogEntry]
    queries: list[dict]  # {"query", "frag_truth", "agg_truth"}


def _entry(tool_id: str, name: str, description: str) -> CatalogEntry:
    return CatalogEntry(
        tool_id=tool_id,
        schema=ToolSchema(name=name, description=description, parameters=[]),
    )


def generate_suite(
    scales: list[int], seed: int, n_queries: int = 300
) -> RecallSuite:
    """Families sized for the largest scale; smaller scales take a
    round-robin prefix so every family is represented at every scale."""
    if not scales or any(s < 1 for s in scales):
        raise ValueError("scales must be positive")
    scales = sorted(set(scales))
    top = scales[-1]
    rng = random.Random(seed)

    n_families = max(8, int(1.8 * math.sqrt(top)))
    vocab = set()
    while len(vocab) < n_families * 4 + 600:
        vocab.add(_word(rng))
    words = sorted(vocab)
    rng.shuffle(words)
    noise_vocab = words[: 600]
    topic_pool = words[600:]

    families = []
    for f in range(n_families):
        topic = topic_pool[f * 4 : f * 4 + 4]
        stem = topic[0]
        families.append({"topic": topic, "stem": stem})

    # round-robin interleave so scale prefixes grow every family evenly
    all_tools: list[dict] = []
    position = 0
    while len(all_tools) < top:
        family_idx = position % n_families
        serial = position // n_families
        family = families[family_idx]
        noise = rng.sample(noise_vocab, 3)
        all_tools.append(
            {
                "tool_id": f"frag-{family_idx:04d}-{serial:05d}",
                "name": f"get_{family['stem']}_{serial}",
                "description": " ".join(family["topic"]) + " " + " ".join(noise),
                "family": family_idx,
            }
        )
        position += 1

    fragmented = {
        scale: [
            _entry(t["tool_id"], t["name"], t["description"])
            for t in all_tools[:scale]
        ]
        for scale in scales
    }
    aggregated = [
        _entry(
            f"agg-{f:04d}",
            f"{family['stem']}_solver",
            " ".join(family["topic"]) + " general merged solver",
        )
        for f, family in enumerate(families)
    ]

    smallest = scales[0]
    query_targets = rng.sample(all_tools[:smallest], min(n_queries, smallest))
    queries = []
    for target in query_targets:
        family = families[target["family"]]
        noise = rng.sample(noise_vocab, 2)
        queries.append(
            {
                "query": "tool for " + " ".join(family["topic"]) + " " + " ".join(noise),
                "frag_truth": [target["tool_id"]],
                "agg_truth": [f"agg-{target['family']:04d}"],
            }
        )
    return RecallSuite(
        scales=scales, fragmented=fragmented, aggregated=aggregated, queries=queries
    )


def run_scaling(
    scales: list[int],
    seed: int,
    embedder,
    k: int = 5,
    n_queries: int = 300,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Recall@k per scale point for both catalog styles; optionally writes
    the table (CSV) and plot data (JSON)."""
    suite = generate_suite(scales, seed, n_queries)
    agg_index = build_index(suite.aggregated, embedder)
    rows = []
    for scale in suite.scales:
        frag_index = build_index(suite.fragmented[scale], embedder)
        frag = measure_recall(
            frag_index,
            [{"query": q["query"], "truth_ids": q["frag_truth"]} for q in suite.queries],
            k,
            embedder,
        )
        agg = measure_recall(
            agg_index,
            [{"query": q["query"], "truth_ids": q["agg_truth"]} for q in suite.queries],
            k,
            embedder,
        )
        rows.append(
            {
                "scale": scale,
                "fragmented_recall": frag["recall"],
                "aggregated_recall": agg["recall"],
                "n_queries": frag["n"],
                "k": k,
            }
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "recall.json").write_text(
            json.dumps({"seed": seed, "rows": rows}, indent=2) + "\n", encoding="utf-8"
        )
        with open(out_dir / "recall.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=["scale", "fragmented_recall", "aggregated_recall", "n_queries", "k"],
            )
            writer.writeheader()
            writer.writerows(rows)
    return rows
