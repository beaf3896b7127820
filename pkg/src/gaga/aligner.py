"""Alignment training: paired subgraphs, shared GCN, quantized prototypes.

Each annotated seed yields a pair of subgraphs: its hop-neighborhood in
the text graph and its annotation's hop-neighborhood in the annotation
graph. Both sides are encoded by one shared GCN over frozen provider
embeddings (a trainable input adapter stands in for tuning the text
encoder itself), mean-pooled, and L2-normalized. Training minimizes a
two-level objective: a contrastive term that pulls matched pooled pairs
together and pushes mismatched ones apart, plus the same term against
vector-quantized prototypes of the annotation side, mixed by alpha.

Prototypes are not on the tape: they receive EMA updates from batch
statistics while gradients pass straight through the quantization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor, Tape
from .errors import ContractError, ShapeError, ValidationError
from .graphs import EmbeddingTable, Tag
from .rng import derive_seed, make_rng


# ---------------------------------------------------------------------------
# subgraph sampling

def khop_nodes(indptr: np.ndarray, indices: np.ndarray, seeds, hops: int,
               cap: int = 256) -> np.ndarray:
    """BFS closure of radius `hops` around the seeds, nearest-first.

    Order is (hop, node id) ascending; truncation at `cap` therefore
    drops the farthest nodes first.
    """
    if hops < 0:
        raise ContractError("hops must be >= 0")
    seen = {int(s): 0 for s in seeds}
    frontier = sorted(seen)
    order = list(frontier)
    for hop in range(1, hops + 1):
        nxt = set()
        for v in frontier:
            for u in indices[indptr[v] : indptr[v + 1]]:
                u = int(u)
                if u not in seen:
                    seen[u] = hop
                    nxt.add(u)
        frontier = sorted(nxt)
        order.extend(frontier)
    return np.asarray(order[:cap], dtype=np.int64)


def normalized_adjacency(indptr: np.ndarray, indices: np.ndarray,
                         nodes: np.ndarray) -> np.ndarray:
    """Dense symmetric-normalized adjacency of the induced subgraph.

    Self-loops are added transiently: A_hat = D^{-1/2} (A + I) D^{-1/2},
    so isolated nodes keep degree one.
    """
    local = {int(v): i for i, v in enumerate(nodes)}
    n = len(nodes)
    a = np.eye(n, dtype=np.float64)
    for v in nodes:
        vi = local[int(v)]
        for u in indices[indptr[v] : indptr[v + 1]]:
            ui = local.get(int(u))
            if ui is not None:
                a[vi, ui] = 1.0
    deg = a.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return (a * inv_sqrt[:, None] * inv_sqrt[None, :]).astype(np.float32)


@dataclass
class SubgraphPair:
    """Matched text-side and annotation-side neighborhoods of one seed."""

    seed: object  # node id, or (i, j) edge
    tag_nodes: np.ndarray
    anno_nodes: np.ndarray
    tag_adj: np.ndarray  # dense normalized adjacency, text side
    anno_adj: np.ndarray  # dense normalized adjacency, annotation side


def sample_subgraph_pair(tag: Tag, anno_indptr: np.ndarray, anno_indices: np.ndarray,
                         seed, anno_index: int, hops: int, cap: int = 256) -> SubgraphPair:
    """Build the paired neighborhoods for one annotated seed.

    Node seeds take the hop-neighborhood around the node; edge seeds take
    it around both endpoints. The annotation side is always the
    hop-neighborhood of the seed's annotation node.
    """
    if isinstance(seed, tuple):
        tag_seeds = [seed[0], seed[1]]
    else:
        tag_seeds = [int(seed)]
    tag_nodes = khop_nodes(tag.indptr, tag.indices, tag_seeds, hops, cap)
    anno_nodes = khop_nodes(anno_indptr, anno_indices, [anno_index], hops, cap)
    return SubgraphPair(
        seed=seed,
        tag_nodes=tag_nodes,
        anno_nodes=anno_nodes,
        tag_adj=normalized_adjacency(tag.indptr, tag.indices, tag_nodes),
        anno_adj=normalized_adjacency(anno_indptr, anno_indices, anno_nodes),
    )


# ---------------------------------------------------------------------------
# GCN encoder

@dataclass
class GcnEncoder:
    """Input adapter plus a stack of graph-convolution weight matrices."""

    adapter: Tensor
    layers: list[Tensor]

    def params(self, prefix: str = "encoder") -> dict[str, Tensor]:
        out = {f"{prefix}.adapter": self.adapter}
        for i, w in enumerate(self.layers):
            out[f"{prefix}.layer{i}"] = w
        return out

    def copy_arrays(self) -> dict[str, np.ndarray]:
        out = {"adapter": self.adapter.data.copy()}
        for i, w in enumerate(self.layers):
            out[f"layer{i}"] = w.data.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.adapter.data[...] = arrays["adapter"]
        for i, w in enumerate(self.layers):
            w.data[...] = arrays[f"layer{i}"]


def init_encoder(in_dim: int, hidden_dim: int, out_dim: int, num_layers: int,
                 seed: int, label: str = "encoder") -> GcnEncoder:
    """Identity-plus-noise adapter; Glorot-scaled layer weights."""
    if num_layers < 1:
        raise ContractError("encoder needs at least one layer")
    rng = make_rng(seed, label, "init")
    adapter = engine.parameter(
        np.eye(in_dim, dtype=np.float32)
        + 0.01 * rng.standard_normal((in_dim, in_dim)).astype(np.float32)
    )
    dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
    layers = []
    for i in range(num_layers):
        std = np.sqrt(2.0 / (dims[i] + dims[i + 1]))
        layers.append(engine.parameter(
            (std * rng.standard_normal((dims[i], dims[i + 1]))).astype(np.float32)
        ))
    return GcnEncoder(adapter=adapter, layers=layers)


def gcn_forward(encoder: GcnEncoder, features: Tensor, adj_hat) -> Tensor:
    """Message passing through the stack; final layer linear, rows normalized."""
    features = engine.as_tensor(features)
    adj = engine.as_tensor(adj_hat)
    if features.shape[0] != adj.shape[0]:
        raise ShapeError(
            f"feature rows {features.shape[0]} do not align with adjacency {adj.shape}"
        )
    h = engine.matmul(features, encoder.adapter)
    last = len(encoder.layers) - 1
    for i, w in enumerate(encoder.layers):
        h = engine.matmul(engine.matmul(adj, h), w)
        if i < last:
            h = engine.relu(h)
    return engine.l2_normalize_rows(h)


def pooled_subgraph_embedding(encoder: GcnEncoder, features: Tensor, adj_hat) -> Tensor:
    """Encode a subgraph and reduce it to one L2-normalized row."""
    h = gcn_forward(encoder, features, adj_hat)
    return engine.l2_normalize_rows(engine.mean_pool_rows(h))


# ---------------------------------------------------------------------------
# contrastive losses

def _contrast_weights(n: int, dtype) -> Tensor:
    w = np.full((n, n), -1.0 / (n - 1), dtype=np.float64)
    np.fill_diagonal(w, 1.0)
    return engine.as_tensor(w.astype(dtype))


def subgraph_contrast_loss(h_t: Tensor, h_a: Tensor) -> Tensor:
    """Matched-pair squared distances minus the mean over mismatched pairs.

    Row i of each input is the pooled embedding of the i-th seed's text
    and annotation subgraphs respectively. Needs n >= 2 rows, otherwise
    the mismatched term is undefined.
    """
    if h_t.shape != h_a.shape or h_t.data.ndim != 2:
        raise ShapeError(f"paired embeddings must match: {h_t.shape} vs {h_a.shape}")
    n = h_t.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs at least 2 pairs")
    d = engine.pairwise_sqdist(h_t, h_a)
    return engine.sum_all(engine.mul(d, _contrast_weights(n, d.dtype)))


def combined_alignment_loss(h_t: Tensor, h_a: Tensor, codebook: "PrototypeCodebook",
                            alpha: float) -> tuple[Tensor, np.ndarray]:
    """alpha-weighted prototype term plus (1 - alpha) times the pair term.

    The prototype term contrasts text embeddings against the quantized
    annotation embeddings (straight-through gradients). Returns the loss
    and the prototype assignment of each annotation row.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    n = h_t.shape[0]
    if n < 2:
        raise ContractError("contrastive loss needs at least 2 pairs")
    base = subgraph_contrast_loss(h_t, h_a)
    z, idx = engine.quantize_rows_st(h_a, codebook.prototypes)
    d = engine.pairwise_sqdist(h_t, z)
    proto = engine.sum_all(engine.mul(d, _contrast_weights(n, d.dtype)))
    loss = engine.add(engine.scale(proto, alpha), engine.scale(base, 1.0 - alpha))
    return loss, idx


# ---------------------------------------------------------------------------
# prototype codebook

@dataclass
class PrototypeCodebook:
    """Quantization prototypes with EMA cluster statistics."""

    prototypes: np.ndarray  # (k, d) float32
    ema_counts: np.ndarray  # (k,) float64
    decay: float
    stale_steps: np.ndarray = field(default=None)
    reseed_after: int = 50
    _reseed_rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float32)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ValidationError("codebook needs at least one prototype row")
        if not np.all(np.isfinite(self.prototypes)):
            raise ValidationError("codebook rows must be finite")
        self.ema_counts = np.asarray(self.ema_counts, dtype=np.float64)
        if np.any(self.ema_counts < 0):
            raise ValidationError("EMA counts must be nonnegative")
        if self.stale_steps is None:
            self.stale_steps = np.zeros(len(self.prototypes), dtype=np.int64)

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def nearest(self, row: np.ndarray) -> tuple[np.ndarray, int]:
        """Nearest prototype row and its index (ties to the lowest index)."""
        row = np.asarray(row, dtype=np.float64)
        d2 = ((self.prototypes.astype(np.float64) - row[None, :]) ** 2).sum(axis=1)
        m = int(d2.argmin())
        return self.prototypes[m].copy(), m


def update_codebook(codebook: PrototypeCodebook, batch: np.ndarray,
                    assignments: np.ndarray) -> None:
    """EMA update of prototypes from one batch of annotation embeddings.

    counts <- decay * counts + (1 - decay) * n_j and the prototype moves
    to the matching weighted blend of its old value and the batch sum.
    Prototypes left unassigned for more than `reseed_after` consecutive
    updates are re-seeded to a random batch row.
    """
    batch = np.asarray(batch, dtype=np.float64)
    assignments = np.asarray(assignments, dtype=np.int64)
    k, d = codebook.size, codebook.dim
    if batch.ndim != 2 or batch.shape[1] != d or len(assignments) != len(batch):
        raise ShapeError("codebook update batch/assignment mismatch")
    nj = np.bincount(assignments, minlength=k).astype(np.float64)
    sums = np.zeros((k, d), dtype=np.float64)
    np.add.at(sums, assignments, batch)

    old_counts = codebook.ema_counts.copy()
    new_counts = codebook.decay * old_counts + (1.0 - codebook.decay) * nj
    protos = codebook.prototypes.astype(np.float64)
    active = new_counts > 0
    blended = codebook.decay * old_counts[:, None] * protos + (1.0 - codebook.decay) * sums
    protos[active] = blended[active] / new_counts[active, None]
    codebook.prototypes = protos.astype(np.float32)
    codebook.ema_counts = new_counts

    codebook.stale_steps = np.where(nj > 0, 0, codebook.stale_steps + 1)
    dead = np.where(codebook.stale_steps > codebook.reseed_after)[0]
    if len(dead) and codebook._reseed_rng is not None:
        for j in dead:
            codebook.prototypes[j] = batch[
                int(codebook._reseed_rng.integers(len(batch)))
            ].astype(np.float32)
            codebook.ema_counts[j] = 0.0
            codebook.stale_steps[j] = 0


def init_codebook(pool: np.ndarray, num_prototypes: int, decay: float,
                  seed: int) -> PrototypeCodebook:
    """k-means prototypes over the pooled annotation embeddings.

    When the pool is smaller than the codebook, the extra rows are
    jittered copies of pool rows so every prototype starts near data.
    """
    from .selection import kmeans

    pool = np.asarray(pool, dtype=np.float32)
    if pool.ndim != 2 or len(pool) < 1:
        raise ContractError("codebook init needs a non-empty pool")
    if num_prototypes < 1:
        raise ContractError("num_prototypes must be >= 1")
    k_eff = min(num_prototypes, len(pool))
    clustering = kmeans(EmbeddingTable(vectors=pool), k_eff,
                        seed=derive_seed(seed, "codebook", "kmeans"))
    protos = np.zeros((num_prototypes, pool.shape[1]), dtype=np.float32)
    counts = np.zeros(num_prototypes, dtype=np.float64)
    protos[:k_eff] = clustering.centers.astype(np.float32)
    counts[:k_eff] = np.bincount(clustering.assignment, minlength=k_eff)
    if num_prototypes > k_eff:
        # a tiny pool cannot seed every row; isotropic filler rows at pool
        # scale keep the codebook full-rank for downstream attention
        rng = make_rng(seed, "codebook", "fill")
        scale = float(np.linalg.norm(pool, axis=1).mean()) / np.sqrt(pool.shape[1])
        protos[k_eff:] = (scale * rng.standard_normal(
            (num_prototypes - k_eff, pool.shape[1]))).astype(np.float32)
    return PrototypeCodebook(
        prototypes=protos,
        ema_counts=counts,
        decay=decay,
        _reseed_rng=make_rng(seed, "codebook", "reseed"),
    )


def random_codebook(num_prototypes: int, dim: int, decay: float,
                    seed: int) -> PrototypeCodebook:
    """Random-init codebook for no-alignment baselines."""
    rng = make_rng(seed, "codebook", "random")
    protos = (rng.standard_normal((num_prototypes, dim)) / np.sqrt(dim)).astype(np.float32)
    return PrototypeCodebook(
        prototypes=protos,
        ema_counts=np.zeros(num_prototypes, dtype=np.float64),
        decay=decay,
        _reseed_rng=make_rng(seed, "codebook", "reseed"),
    )


# ---------------------------------------------------------------------------
# training loop

@dataclass
class AlignOptions:
    alpha: float = 0.6
    num_prototypes: int = 40
    hops: int = 2
    node_cap: int = 256
    epochs: int = 200
    batch_size: int = 32
    lr: float = 5e-5
    hidden_dim: int = 64
    num_layers: int = 4
    ema_decay: float = 0.99


def align_train(tag: Tag, anno_graph, selection, node_emb: EmbeddingTable,
                options: AlignOptions, seed: int,
                ) -> tuple[GcnEncoder, PrototypeCodebook, list[dict]]:
    """Train the shared encoder and codebook over all annotated seeds.

    Returns the encoder, the codebook, and a per-epoch loss log. With
    zero epochs the encoder is exactly its initialization and the
    codebook is the k-means of the initial annotation embeddings.
    """
    target_to_anno = {
        _key(rec.target): i for i, rec in enumerate(anno_graph.records)
    }
    seeds = [item for item in selection.items if _key(item) in target_to_anno]
    if len(seeds) < 2:
        raise ContractError(f"alignment needs at least 2 annotated seeds, got {len(seeds)}")

    anno_emb = anno_graph.embeddings
    if anno_emb.dim != node_emb.dim:
        raise ShapeError(
            f"annotation dim {anno_emb.dim} differs from node dim {node_emb.dim}; "
            "both sides share one encoder"
        )

    pairs = [
        sample_subgraph_pair(
            tag, anno_graph.indptr, anno_graph.indices, item,
            target_to_anno[_key(item)], options.hops, options.node_cap,
        )
        for item in seeds
    ]
    tag_feats = [engine.as_tensor(node_emb.vectors[p.tag_nodes]) for p in pairs]
    anno_feats = [engine.as_tensor(anno_emb.vectors[p.anno_nodes]) for p in pairs]

    encoder = init_encoder(node_emb.dim, options.hidden_dim, node_emb.dim,
                           options.num_layers, seed, label="align")

    # quantization space is seeded from the untrained annotation-side pool
    init_pool = np.concatenate([
        pooled_subgraph_embedding(encoder, anno_feats[i], pairs[i].anno_adj).data
        for i in range(len(pairs))
    ], axis=0)
    codebook = init_codebook(init_pool, options.num_prototypes, options.ema_decay, seed)

    params = encoder.params()
    optimizer = engine.Adam(params, lr=options.lr)
    rng = make_rng(seed, "align", "epochs")
    log: list[dict] = []

    for epoch in range(options.epochs):
        order = rng.permutation(len(pairs))
        batches = _batched(order, options.batch_size)
        epoch_loss = 0.0
        for batch in batches:
            with Tape() as tape:
                h_t = engine.concat_rows([
                    pooled_subgraph_embedding(encoder, tag_feats[i], pairs[i].tag_adj)
                    for i in batch
                ])
                h_a = engine.concat_rows([
                    pooled_subgraph_embedding(encoder, anno_feats[i], pairs[i].anno_adj)
                    for i in batch
                ])
                loss, idx = combined_alignment_loss(h_t, h_a, codebook, options.alpha)
                engine.backward(loss, tape)
            optimizer.step()
            optimizer.zero_grad()
            update_codebook(codebook, h_a.data, idx)
            epoch_loss += loss.item() * len(batch)
        log.append({"epoch": epoch, "loss": epoch_loss / len(pairs)})
    return encoder, codebook, log


def _key(target) -> tuple:
    if isinstance(target, (tuple, list)):
        return ("edge", int(target[0]), int(target[1]))
    return ("node", int(target))


def _batched(order: np.ndarray, batch_size: int) -> list[list[int]]:
    """Contiguous chunks; a trailing singleton merges into the previous batch."""
    batch_size = max(2, batch_size)
    chunks = [list(order[i : i + batch_size]) for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return [[int(i) for i in chunk] for chunk in chunks]
