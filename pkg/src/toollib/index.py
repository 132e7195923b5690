"""Exact cosine k-NN over embedded catalog entries.

Catalogs stay small after aggregation, so search is a dense dot product
against pre-normalized vectors; no approximate structure, fully
deterministic ranking with ties broken by ascending tool id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schema import CatalogEntry

_MAGIC = b"TLIBIDX1"
_METRIC_CODES = {"cosine": 0}
_METRIC_NAMES = {0: "cosine"}
_ID_WIDTH = 64


class IndexError_(ValueError):
    """Index build, serialization, or query failure."""


@dataclass
class VectorIndex:
    dim: int
    tool_ids: list[str]
    vectors: np.ndarray  # (n, dim) float64, unit rows, rows sorted by tool_id
    texts: list[str]
    metric: str = "cosine"

    def __len__(self) -> int:
        return len(self.tool_ids)

    def validate(self) -> None:
        if self.metric not in _METRIC_CODES:
            raise IndexError_(f"unknown metric {self.metric!r}")
        if self.vectors.shape != (len(self.tool_ids), self.dim):
            raise IndexError_(
                f"vector block {self.vectors.shape} does not match "
                f"{len(self.tool_ids)} entries of dim {self.dim}"
            )
        if len(set(self.tool_ids)) != len(self.tool_ids):
            raise IndexError_("duplicate tool_id in index")
        if len(self.tool_ids) and not np.allclose(
            np.linalg.norm(self.vectors, axis=1), 1.0, atol=1e-6
        ):
            raise IndexError_("index vectors must be unit norm")


def embedded_text(name: str, description: str) -> str:
    return f"{name}: {description}"


def build_index(entries: list[CatalogEntry], embedder) -> VectorIndex:
    """Embed ``name: description`` per entry; rows ordered by tool_id."""
    seen = set()
    for entry in entries:
        if entry.tool_id in seen:
            raise IndexError_(f"duplicate tool_id {entry.tool_id}")
        seen.add(entry.tool_id)
    ordered = sorted(entries, key=lambda e: e.tool_id)
    texts = [embedded_text(e.schema.name, e.schema.description) for e in ordered]
    if ordered:
        vectors = np.asarray(embedder.embed(texts), dtype=np.float64)
    else:
        vectors = np.zeros((0, embedder.dim), dtype=np.float64)
    index = VectorIndex(
        dim=embedder.dim,
        tool_ids=[e.tool_id for e in ordered],
        vectors=vectors,
        texts=texts,
    )
    index.validate()
    return index


def knn(index: VectorIndex, query_text: str, k: int, embedder) -> list[dict]:
    """Top-k entries by exact cosine score, descending; ties go to the
    ascending tool_id (rows are already in that order, so a stable sort on
    negated scores realizes the tie-break)."""
    if k < 1:
        raise IndexError_(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise IndexError_("cannot query an empty index")
    query = np.asarray(embedder.embed([query_text]), dtype=np.float64)[0]
    scores = index.vectors @ query
    order = np.argsort(-scores, kind="stable")[: min(k, len(index))]
    return [
        {"tool_id": index.tool_ids[i], "score": float(scores[i])} for i in order
    ]


def measure_recall(
    index: VectorIndex,
    queries: list[dict],
    k: int,
    embedder,
) -> dict:
    """recall@k: fraction of queries whose truth set intersects the top-k.

    Each query is ``{"query": text, "truth_ids": [...]}``. Truth ids missing
    from the index count the query as a miss, with a warning.
    """
    if k < 1:
        raise IndexError_(f"k must be >= 1, got {k}")
    known = set(index.tool_ids)
    hits = 0
    warnings: list[str] = []
    for q in queries:
        truth = set(q["truth_ids"])
        if not truth & known:
            warnings.append(f"truth ids absent from index for query {q['query']!r}")
            continue
        top = {r["tool_id"] for r in knn(index, q["query"], k, embedder)}
        if top & truth:
            hits += 1
    n = len(queries)
    return {
        "recall": hits / n if n else 0.0,
        "hits": hits,
        "n": n,
        "k": k,
        "warnings": warnings,
    }


def save_index(index: VectorIndex, path: str | Path) -> None:
    """Binary layout (all integers little-endian):

    - 8 bytes magic ``TLIBIDX1``
    - u32 dim, u32 count, u8 metric code, 3 zero pad bytes
    - count fixed-width records: 64-byte NUL-padded ASCII tool_id,
      then dim float32 components
    - count text blobs: u32 byte length + UTF-8 bytes
    """
    index.validate()
    parts = [_MAGIC]
    parts.append(
        struct.pack(
            "<IIB3x", index.dim, len(index), _METRIC_CODES[index.metric]
        )
    )
    vectors32 = index.vectors.astype("<f4")
    for i, tool_id in enumerate(index.tool_ids):
        raw = tool_id.encode("ascii")
        if len(raw) > _ID_WIDTH:
            raise IndexError_(f"tool_id longer than {_ID_WIDTH} bytes: {tool_id}")
        parts.append(raw.ljust(_ID_WIDTH, b"\x00"))
        parts.append(vectors32[i].tobytes())
    for text in index.texts:
        blob = text.encode("utf-8")
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    Path(path).write_bytes(b"".join(parts))


def load_index(path: str | Path) -> VectorIndex:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise IndexError_(f"{path}: not an index file (bad magic)")
    dim, count, metric_code = struct.unpack_from("<IIB", data, 8)
    if metric_code not in _METRIC_NAMES:
        raise IndexError_(f"{path}: unknown metric code {metric_code}")
    offset = 8 + struct.calcsize("<IIB3x")
    record = _ID_WIDTH + 4 * dim
    tool_ids: list[str] = []
    rows = np.empty((count, dim), dtype=np.float64)
    for i in range(count):
        start = offset + i * record
        raw_id = data[start : start + _ID_WIDTH].rstrip(b"\x00")
        tool_ids.append(raw_id.decode("ascii"))
        rows[i] = np.frombuffer(
            data, dtype="<f4", count=dim, offset=start + _ID_WIDTH
        )
    # re-normalize: float32 storage nudges norms off unit by ~1e-7
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if count:
        rows = rows / np.where(norms == 0.0, 1.0, norms)
    pos = offset + count * record
    texts: list[str] = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        texts.append(data[pos : pos + length].decode("utf-8"))
        pos += length
    index = VectorIndex(dim=dim, tool_ids=tool_ids, vectors=rows, texts=texts,
                        metric=_METRIC_NAMES[metric_code])
    index.validate()
    return index
