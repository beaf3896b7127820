"""Annotation graph: cosine-KNN wiring over annotation embeddings.

Each annotation becomes a node (in selection order); every node links
to its k nearest neighbors by cosine similarity and the directed union
is stored symmetrized, so degrees may exceed k. Brute-force all-pairs
similarity is fine at the few-thousand-annotation scale this targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError
from .graphs import EmbeddingTable, Tag, make_tag, save_tag, load_tag
from .providers import AnnotationRecord


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractError(f"cosine_sim dim mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine_sim of a zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass
class AnnotationGraph:
    """Annotation nodes plus symmetrized KNN edges."""

    records: list[AnnotationRecord]
    embeddings: EmbeddingTable
    indptr: np.ndarray
    indices: np.ndarray
    knn_k: int

    @property
    def num_nodes(self) -> int:
        return len(self.records)

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def as_tag(self) -> Tag:
        """View as a plain graph so all graph tooling applies."""
        pairs = []
        for v in range(self.num_nodes):
            for u in self.neighbors(v):
                if v < u:
                    pairs.append((v, int(u)))
        return make_tag(
            self.num_nodes,
            np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
            [r.annotation_text for r in self.records],
        )


def build_annotation_graph(records: list[AnnotationRecord], embeddings: EmbeddingTable,
                           knn_k: int) -> AnnotationGraph:
    """Connect each annotation to its knn_k most cosine-similar peers.

    Ties break toward the lowest index; the union of directed picks is
    symmetrized. Requires knn_k < number of annotations.
    """
    n = len(records)
    if embeddings.count != n:
        raise ContractError(
            f"{n} records but {embeddings.count} embedding rows (must be row-aligned)"
        )
    if not (1 <= knn_k < n):
        raise ContractError(f"knn_k={knn_k} must be in [1, {n - 1}]")
    vecs = embeddings.vectors.astype(np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("annotation embedding with zero norm")
    unit = vecs / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)

    pairs = set()
    order_cols = np.arange(n)
    for i in range(n):
        row = sim[i].copy()
        row[i] = -np.inf  # no self-edges
        # sort by similarity descending, then index ascending
        order = np.lexsort((order_cols, -row))
        for j in order[:knn_k]:
            a, b = (i, int(j)) if i < j else (int(j), i)
            pairs.add((a, b))

    pair_arr = np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    skeleton = make_tag(n, pair_arr, ["" for _ in range(n)])
    return AnnotationGraph(
        records=records,
        embeddings=embeddings,
        indptr=skeleton.indptr,
        indices=skeleton.indices,
        knn_k=knn_k,
    )


def save_annotation_graph(graph: AnnotationGraph, directory, config_hash: str = "") -> None:
    """Standard node-JSONL + edge-list files, plus embeddings and metadata."""
    from .graphs import save_embeddings

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tag(graph.as_tag(), directory / "nodes.jsonl", directory / "edges.txt")
    save_embeddings(graph.embeddings, directory / "embeddings.gemb")
    meta = {
        "config_hash": config_hash,
        "knn_k": graph.knn_k,
        "records": [r.to_json() for r in graph.records],
    }
    (directory / "meta.json").write_text(
        json.dumps(meta, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_annotation_graph(directory) -> tuple[AnnotationGraph, str]:
    from .graphs import load_embeddings

    directory = Path(directory)
    tag = load_tag(directory / "nodes.jsonl", directory / "edges.txt")
    emb = load_embeddings(directory / "embeddings.gemb")
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    records = [AnnotationRecord.from_json(obj) for obj in meta["records"]]
    graph = AnnotationGraph(
        records=records,
        embeddings=emb,
        indptr=tag.indptr,
        indices=tag.indices,
        knn_k=int(meta["knn_k"]),
    )
    return graph, meta.get("config_hash", "")
