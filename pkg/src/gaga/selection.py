"""Representative node/edge selection by information density.

Nodes are clustered with seeded k-means++ / Lloyd iterations; each
node's distance to its cluster center maps to a density score
1 / (1 + distance) in (0, 1]. The nodes (or edges, scored by endpoint
sum) with the highest density win the annotation budget. All
tie-breaking is by lowest id so selection is reproducible.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ValidationError
from .graphs import EmbeddingTable, Tag
from .rng import make_rng

log = logging.getLogger(__name__)


@dataclass
class Clustering:
    centers: np.ndarray  # (k, d) float64
    assignment: np.ndarray  # (n,) int64, nearest center (ties: lowest index)
    inertia: float


def _assign(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest center per point (argmin takes the lowest index on ties)."""
    d2 = (
        (points**2).sum(axis=1, keepdims=True)
        + (centers**2).sum(axis=1, keepdims=True).T
        - 2.0 * points @ centers.T
    )
    np.maximum(d2, 0.0, out=d2)
    assign = d2.argmin(axis=1)
    return assign, d2[np.arange(len(points)), assign]


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[int(rng.integers(n))]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[j] = points[int(rng.integers(n))]
        else:
            centers[j] = points[rng.choice(n, p=closest / total)]
        d = ((points - centers[j]) ** 2).sum(axis=1)
        np.minimum(closest, d, out=closest)
    return centers


def kmeans(emb: EmbeddingTable, k: int, max_iter: int = 100, seed: int = 0) -> Clustering:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments stabilize or after max_iter sweeps; an
    emptied cluster is re-seeded to the point currently farthest from
    its own center. The returned assignment is always consistent with
    the returned centers.
    """
    points = emb.vectors.astype(np.float64)
    n = len(points)
    if k < 1 or k > n:
        raise ContractError(f"kmeans: k={k} outside [1, {n}]")
    rng = make_rng(seed, "kmeans")
    centers = _kmeanspp_init(points, k, rng)
    assign, d2 = _assign(points, centers)
    for _ in range(max_iter):
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
            else:
                # revive an empty cluster at the worst-fit point
                far = int(d2.argmax())
                centers[j] = points[far]
                d2[far] = 0.0
        new_assign, d2 = _assign(points, centers)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    inertia = float(d2.sum())
    return Clustering(centers=centers, assignment=assign.astype(np.int64), inertia=inertia)


def density_score(emb_row: np.ndarray, center: np.ndarray) -> float:
    """Similarity 1 / (1 + ||emb - center||); 1 exactly at zero distance."""
    emb_row = np.asarray(emb_row, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if emb_row.shape != center.shape:
        raise ContractError(
            f"density_score dim mismatch: {emb_row.shape} vs {center.shape}"
        )
    return 1.0 / (1.0 + float(np.linalg.norm(emb_row - center)))


def node_density_scores(emb: EmbeddingTable, clustering: Clustering) -> np.ndarray:
    centers = clustering.centers[clustering.assignment]
    dist = np.linalg.norm(emb.vectors.astype(np.float64) - centers, axis=1)
    return 1.0 / (1.0 + dist)


@dataclass
class SelectionResult:
    """Budgeted picks with their density scores, sorted non-increasing."""

    kind: str  # "node" | "edge"
    items: list  # node ids, or (i, j) pairs
    scores: list
    budget: int

    def __post_init__(self):
        if self.kind not in ("node", "edge"):
            raise ValidationError(f"unknown selection kind {self.kind!r}")
        if len(self.items) != len(self.scores):
            raise ValidationError("items/scores length mismatch")
        if any(self.scores[i] < self.scores[i + 1] for i in range(len(self.scores) - 1)):
            raise ValidationError("selection scores must be non-increasing")

    def save_jsonl(self, path, config_hash: str = "") -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"kind": self.kind, "budget": self.budget, "config_hash": config_hash}
            fh.write(json.dumps(header) + "\n")
            for item, score in zip(self.items, self.scores):
                ids = [int(item)] if self.kind == "node" else [int(item[0]), int(item[1])]
                fh.write(json.dumps({"kind": self.kind, "ids": ids, "score": score}) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> tuple["SelectionResult", str]:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValidationError(f"{path}: empty selection file")
        header = json.loads(lines[0])
        items, scores = [], []
        for line in lines[1:]:
            rec = json.loads(line)
            ids = rec["ids"]
            items.append(ids[0] if header["kind"] == "node" else (ids[0], ids[1]))
            scores.append(float(rec["score"]))
        return (
            cls(kind=header["kind"], items=items, scores=scores, budget=header["budget"]),
            header.get("config_hash", ""),
        )


def select_nodes(emb: EmbeddingTable, clustering: Clustering, budget: int) -> SelectionResult:
    """Top-budget nodes by density; ties broken toward the lowest node id."""
    if budget < 1:
        raise ContractError("node budget must be >= 1")
    scores = node_density_scores(emb, clustering)
    n = len(scores)
    if budget > n:
        log.warning("node budget %d exceeds population %d; clamping", budget, n)
        budget = n
    order = np.lexsort((np.arange(n), -scores))
    chosen = order[:budget]
    return SelectionResult(
        kind="node",
        items=[int(i) for i in chosen],
        scores=[float(scores[i]) for i in chosen],
        budget=budget,
    )


def select_edges(tag: Tag, node_scores: np.ndarray, budget: int) -> SelectionResult:
    """Top-budget edges by endpoint score sum; ties toward the smallest (i, j)."""
    if budget < 1:
        raise ContractError("edge budget must be >= 1")
    edges = tag.edge_array()
    if len(node_scores) < tag.num_nodes:
        raise ContractError("node_scores must cover every endpoint")
    if len(edges) == 0:
        raise ValidationError("graph has no edges to select from")
    scores = node_scores[edges[:, 0]] + node_scores[edges[:, 1]]
    if budget > len(edges):
        log.warning("edge budget %d exceeds edge count %d; clamping", budget, len(edges))
        budget = len(edges)
    order = np.lexsort((edges[:, 1], edges[:, 0], -scores))
    chosen = order[:budget]
    return SelectionResult(
        kind="edge",
        items=[(int(edges[i, 0]), int(edges[i, 1])) for i in chosen],
        scores=[float(scores[i]) for i in chosen],
        budget=budget,
    )


def default_node_budget(num_nodes: int, fraction: float = 0.01) -> int:
    return max(1, int(np.ceil(fraction * num_nodes)))


def default_edge_budget(num_edges: int) -> int:
    return max(1, int(np.ceil(np.sqrt(num_edges))))
