"""Task fine-tuning and evaluation with prototype cross-attention.

Node embeddings from the (aligned) GCN attend over the frozen prototype
codebook: queries come from nodes, keys and values from prototypes, and
the fused representation feeds either a softmax classification head or
an elementwise-product link scorer. Fine-tuning trains the GCN, the
adapter, the attention projections, and the task head with Adam while
the codebook stays frozen; the best-validation checkpoint is returned.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor, Tape
from .errors import ContractError, ShapeError, ValidationError
from .graphs import EdgeSplit, EmbeddingTable, Tag
from .aligner import (
    GcnEncoder,
    PrototypeCodebook,
    gcn_forward,
    init_encoder,
    normalized_adjacency,
    random_codebook,
)
from .rng import make_rng


# ---------------------------------------------------------------------------
# fusion and heads

@dataclass
class FusionHead:
    """Query/key/value projections over a frozen prototype codebook."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    codebook: PrototypeCodebook
    d_k: int
    residual: bool = False

    def params(self, prefix: str = "fusion") -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
                f"{prefix}.w_v": self.w_v}


def init_fusion(dim: int, d_k: int, codebook: PrototypeCodebook, seed: int,
                residual: bool = False) -> FusionHead:
    """Projections for prototype attention.

    The key projection starts as a copy of the query projection (they
    train independently afterwards): with tied random projections,
    W_q W_k^T is approximately a scaled identity, so the initial
    attention logits already reflect node-prototype affinity instead of
    an arbitrary bilinear form.
    """
    if d_k < 1:
        raise ContractError("d_k must be positive")
    if residual and d_k != dim:
        raise ContractError("residual fusion requires d_k == input dim")
    if codebook.dim != dim:
        raise ContractError("tied query/key init expects codebook dim == input dim")
    rng = make_rng(seed, "fusion", "init")
    std = np.sqrt(2.0 / (dim + d_k))
    w_q = (std * rng.standard_normal((dim, d_k))).astype(np.float32)
    w_v = (std * rng.standard_normal((codebook.dim, d_k))).astype(np.float32)
    return FusionHead(
        w_q=engine.parameter(w_q),
        w_k=engine.parameter(w_q.copy()),
        w_v=engine.parameter(w_v),
        codebook=codebook,
        d_k=d_k,
        residual=residual,
    )


def cross_attention(h: Tensor, fusion: FusionHead) -> Tensor:
    """Attend from node embeddings over the prototype rows.

    h' = softmax(h W_q (Z W_k)^T / sqrt(d_k)) Z W_v; each output row is a
    convex combination of projected prototypes. No residual term unless
    the fusion head was built with one.
    """
    if fusion.codebook.size < 1:
        raise ContractError("cross_attention needs a non-empty codebook")
    h = engine.as_tensor(h)
    z = engine.as_tensor(fusion.codebook.prototypes)
    q = engine.matmul(h, fusion.w_q)
    k = engine.matmul(z, fusion.w_k)
    v = engine.matmul(z, fusion.w_v)
    logits = engine.scale(engine.matmul(q, engine.transpose(k)), 1.0 / np.sqrt(fusion.d_k))
    weights = engine.softmax_rows(logits)
    fused = engine.matmul(weights, v)
    if fusion.residual:
        fused = engine.add(fused, h)
    return fused


@dataclass
class TaskHead:
    """Linear classification map (with bias) or link weight vector."""

    task: str  # "node" | "link"
    weight: Tensor
    bias: Tensor | None = None

    def params(self, prefix: str = "head") -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


def init_task_head(task: str, d_k: int, num_classes: int, seed: int) -> TaskHead:
    rng = make_rng(seed, "head", "init")
    if task == "node":
        if num_classes < 2:
            raise ValidationError("node task needs at least 2 classes")
        std = np.sqrt(2.0 / (d_k + num_classes))
        w = engine.parameter((std * rng.standard_normal((d_k, num_classes))).astype(np.float32))
        b = engine.parameter(np.zeros((1, num_classes), dtype=np.float32))
        return TaskHead(task="node", weight=w, bias=b)
    if task == "link":
        std = np.sqrt(1.0 / d_k)
        w = engine.parameter((std * rng.standard_normal((d_k, 1))).astype(np.float32))
        return TaskHead(task="link", weight=w)
    raise ValidationError(f"unknown task {task!r}")


def class_logits(fused: Tensor, head: TaskHead) -> Tensor:
    if head.task != "node":
        raise ContractError("class_logits needs a node-task head")
    return engine.add(engine.matmul(fused, head.weight), head.bias)


def classify(fused_row: Tensor, head: TaskHead) -> np.ndarray:
    """Class probabilities for one fused row; argmax ties go to the lowest id."""
    logits = class_logits(engine.as_tensor(fused_row), head)
    return engine.softmax_rows(logits).data[0]


def link_scores(fused: Tensor, src, dst, head: TaskHead) -> Tensor:
    """Raw pre-sigmoid scores of node pairs; symmetric in (src, dst)."""
    if head.task != "link":
        raise ContractError("link_scores needs a link-task head")
    ha = engine.gather_rows(fused, np.asarray(src, dtype=np.int64))
    hb = engine.gather_rows(fused, np.asarray(dst, dtype=np.int64))
    return engine.matmul(engine.mul(ha, hb), head.weight)


def link_score(h_a, h_b, head: TaskHead) -> float:
    """Edge probability sigmoid((h_a ⊙ h_b) . w) for a single pair."""
    ha = engine.as_tensor(np.asarray(h_a, dtype=np.float32).reshape(1, -1))
    hb = engine.as_tensor(np.asarray(h_b, dtype=np.float32).reshape(1, -1))
    s = engine.sigmoid(engine.matmul(engine.mul(ha, hb), head.weight))
    return float(s.data[0, 0])


# ---------------------------------------------------------------------------
# metrics

def rank_against_negatives(pos_score: float, neg_scores: np.ndarray) -> int:
    """Pessimistic rank: 1 + negatives scoring >= the positive."""
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    pos = np.float64(pos_score)
    return int(1 + (neg_scores > pos).sum() + (neg_scores == pos).sum())


def mrr_at_10(ranks) -> float:
    """Mean reciprocal rank with ranks beyond 10 contributing zero."""
    ranks = list(ranks)
    if not ranks:
        raise ContractError("mrr_at_10 of an empty rank list")
    total = 0.0
    for r in ranks:
        if r < 1:
            raise ContractError(f"rank must be >= 1, got {r}")
        if r <= 10:
            total += 1.0 / r
    return total / len(ranks)


def auc(pos_scores, neg_scores) -> float:
    """P(pos outscores neg) with ties credited one half (midrank form)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ContractError("auc needs non-empty positive and negative score sets")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average of 1-based ranks i+1..j
        i = j
    pos_rank_sum = ranks[: pos.size].sum()
    return float((pos_rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# evaluation report

@dataclass
class EvalReport:
    """Per-split metrics plus runtime/memory gauges.

    Gauges are volatile and excluded from the canonical JSON so that
    identical runs serialize byte-identically; the pipeline writes them
    to a sidecar instead.
    """

    task: str
    metrics: dict
    best_epoch: int
    epochs_trained: int
    runtime_seconds: float = 0.0
    peak_rss_kb: int = 0

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "metrics": self.metrics,
            "best_epoch": self.best_epoch,
            "epochs_trained": self.epochs_trained,
        }

    def gauges(self) -> dict:
        return {"runtime_seconds": self.runtime_seconds, "peak_rss_kb": self.peak_rss_kb}


def _peak_rss_kb() -> int:
    try:
        import resource

        return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
    except Exception:  # pragma: no cover
        return 0


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass
class FinetuneOptions:
    lr: float = 1e-3
    epochs: int = 200
    patience: int = 20
    d_k: int = 0  # 0 -> match embedding dim
    residual: bool = False
    hidden_dim: int = 64
    num_layers: int = 4
    num_prototypes: int = 40


@dataclass
class ModelState:
    """Everything trainable plus the frozen codebook and optimizer moments."""

    encoder: GcnEncoder
    fusion: FusionHead
    head: TaskHead
    adam_state: engine.AdamState | None = None

    def params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params())
        out.update(self.fusion.params())
        out.update(self.head.params())
        return out

    def copy_param_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params().items():
            p.data[...] = arrays[name]


def build_model(task: str, dim: int, num_classes: int,
                encoder: GcnEncoder | None, codebook: PrototypeCodebook | None,
                options: FinetuneOptions, seed: int) -> ModelState:
    """Assemble the trainable stack; None encoder/codebook means random init."""
    if encoder is None:
        encoder = init_encoder(dim, options.hidden_dim, dim, options.num_layers,
                               seed, label="baseline")
    if codebook is None:
        codebook = random_codebook(options.num_prototypes, dim, 0.99, seed)
    d_k = options.d_k if options.d_k > 0 else dim
    fusion = init_fusion(dim, d_k, codebook, seed, residual=options.residual)
    head = init_task_head(task, d_k, num_classes, seed)
    return ModelState(encoder=encoder, fusion=fusion, head=head)


def forward_fused(state: ModelState, features: Tensor, adj) -> Tensor:
    h = gcn_forward(state.encoder, features, adj)
    return cross_attention(h, state.fusion)


def split_accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return 0.0
    pred = logits[mask].argmax(axis=1)
    return float((pred == labels[mask]).mean())


def finetune_node(tag: Tag, node_emb: EmbeddingTable, encoder: GcnEncoder | None,
                  codebook: PrototypeCodebook | None, options: FinetuneOptions,
                  seed: int) -> tuple[ModelState, EvalReport, list[dict]]:
    """Full-batch cross-entropy training with validation early stopping."""
    if tag.num_classes < 2 or not (tag.labels >= 0).any():
        raise ValidationError("node task requires labeled nodes with >= 2 classes")
    t0 = time.perf_counter()
    state = build_model("node", node_emb.dim, tag.num_classes, encoder, codebook,
                        options, seed)
    params = state.params()
    optimizer = engine.Adam(params, lr=options.lr)
    state.adam_state = optimizer.state

    features = engine.as_tensor(node_emb.vectors)
    adj = engine.as_tensor(
        normalized_adjacency(tag.indptr, tag.indices, np.arange(tag.num_nodes))
    )
    train_idx = np.where(tag.split == 0)[0]
    masks = {name: tag.split == code for code, name in enumerate(("train", "valid", "test"))}
    labels = tag.labels

    def eval_logits() -> np.ndarray:
        fused = forward_fused(state, features, adj)
        return class_logits(fused, state.head).data

    best = {"metric": -1.0, "epoch": -1, "arrays": state.copy_param_arrays()}
    history: list[dict] = []
    logits = eval_logits()
    best["metric"] = split_accuracy(logits, labels, masks["valid"])
    best["epoch"] = 0
    stale = 0
    epochs_run = 0
    for epoch in range(1, options.epochs + 1):
        with Tape() as tape:
            fused = forward_fused(state, features, adj)
            out = class_logits(fused, state.head)
            loss = engine.cross_entropy_mean(
                engine.gather_rows(out, train_idx), labels[train_idx]
            )
            engine.backward(loss, tape)
        optimizer.step()
        optimizer.zero_grad()
        logits = eval_logits()
        valid_acc = split_accuracy(logits, labels, masks["valid"])
        history.append({"epoch": epoch, "train_loss": loss.item(), "valid_metric": valid_acc})
        epochs_run = epoch
        if valid_acc > best["metric"]:
            best = {"metric": valid_acc, "epoch": epoch, "arrays": state.copy_param_arrays()}
            stale = 0
        else:
            stale += 1
            if stale >= options.patience:
                break

    state.load_param_arrays(best["arrays"])
    logits = eval_logits()
    metrics = {
        name: {"accuracy": split_accuracy(logits, labels, mask)}
        for name, mask in masks.items()
    }
    report = EvalReport(
        task="node",
        metrics=metrics,
        best_epoch=best["epoch"],
        epochs_trained=epochs_run,
        runtime_seconds=time.perf_counter() - t0,
        peak_rss_kb=_peak_rss_kb(),
    )
    return state, report, history


def _sample_train_negatives(tag: Tag, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform non-edges of the full graph, one per training positive."""
    n = tag.num_nodes
    out = np.zeros((count, 2), dtype=np.int64)
    got = 0
    while got < count:
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if u == v:
            continue
        if tag.has_edge(u, v):
            continue
        out[got] = (min(u, v), max(u, v))
        got += 1
    return out


def link_eval(state: ModelState, features: Tensor, adj, pos: np.ndarray,
               neg: np.ndarray) -> tuple[float, float]:
    """MRR@10 against per-positive candidate lists, AUC over all scores."""
    fused = forward_fused(state, features, adj)
    pos_s = link_scores(fused, pos[:, 0], pos[:, 1], state.head).data[:, 0]
    flat_neg = neg.reshape(-1, 2)
    neg_s = link_scores(fused, flat_neg[:, 0], flat_neg[:, 1], state.head).data[:, 0]
    neg_per_pos = neg_s.reshape(len(pos), -1)
    ranks = [
        rank_against_negatives(pos_s[i], neg_per_pos[i]) for i in range(len(pos))
    ]
    return mrr_at_10(ranks), auc(pos_s, neg_s)


def finetune_link(tag: Tag, split: EdgeSplit, node_emb: EmbeddingTable,
                  encoder: GcnEncoder | None, codebook: PrototypeCodebook | None,
                  options: FinetuneOptions, seed: int,
                  ) -> tuple[ModelState, EvalReport, list[dict]]:
    """Binary cross-entropy on train positives vs per-epoch uniform negatives.

    Messages pass over the training adjacency only; the best-validation
    (MRR@10) checkpoint is evaluated on the held-out test candidates.
    """
    if len(split.train_pos) < 1 or len(split.valid_pos) < 1 or len(split.test_pos) < 1:
        raise ValidationError("link task requires non-empty train/valid/test edge splits")
    t0 = time.perf_counter()
    train_tag = tag.with_edges(split.train_pos)
    state = build_model("link", node_emb.dim, tag.num_classes, encoder, codebook,
                        options, seed)
    params = state.params()
    optimizer = engine.Adam(params, lr=options.lr)
    state.adam_state = optimizer.state

    features = engine.as_tensor(node_emb.vectors)
    adj = engine.as_tensor(
        normalized_adjacency(train_tag.indptr, train_tag.indices,
                             np.arange(train_tag.num_nodes))
    )
    rng = make_rng(seed, "finetune", "link-negatives")
    pos = split.train_pos
    targets = np.concatenate([
        np.ones((len(pos), 1), dtype=np.float64),
        np.zeros((len(pos), 1), dtype=np.float64),
    ])

    best_mrr, best_auc = link_eval(state, features, adj, split.valid_pos, split.valid_neg)
    best = {"metric": best_mrr, "epoch": 0, "arrays": state.copy_param_arrays()}
    history: list[dict] = []
    stale = 0
    epochs_run = 0
    for epoch in range(1, options.epochs + 1):
        negs = _sample_train_negatives(tag, len(pos), rng)
        with Tape() as tape:
            fused = forward_fused(state, features, adj)
            s_pos = link_scores(fused, pos[:, 0], pos[:, 1], state.head)
            s_neg = link_scores(fused, negs[:, 0], negs[:, 1], state.head)
            scores = engine.concat_rows([s_pos, s_neg])
            loss = engine.bce_with_logits_mean(scores, targets)
            engine.backward(loss, tape)
        optimizer.step()
        optimizer.zero_grad()
        valid_mrr, _ = link_eval(state, features, adj, split.valid_pos, split.valid_neg)
        history.append({"epoch": epoch, "train_loss": loss.item(), "valid_metric": valid_mrr})
        epochs_run = epoch
        if valid_mrr > best["metric"]:
            best = {"metric": valid_mrr, "epoch": epoch, "arrays": state.copy_param_arrays()}
            stale = 0
        else:
            stale += 1
            if stale >= options.patience:
                break

    state.load_param_arrays(best["arrays"])
    valid_mrr, valid_auc = link_eval(state, features, adj, split.valid_pos, split.valid_neg)
    test_mrr, test_auc = link_eval(state, features, adj, split.test_pos, split.test_neg)
    metrics = {
        "valid": {"mrr_at_10": valid_mrr, "auc": valid_auc},
        "test": {"mrr_at_10": test_mrr, "auc": test_auc},
    }
    report = EvalReport(
        task="link",
        metrics=metrics,
        best_epoch=best["epoch"],
        epochs_trained=epochs_run,
        runtime_seconds=time.perf_counter() - t0,
        peak_rss_kb=_peak_rss_kb(),
    )
    return state, report, history


def finetune(tag: Tag, node_emb: EmbeddingTable, encoder: GcnEncoder | None,
             codebook: PrototypeCodebook | None, task: str, options: FinetuneOptions,
             seed: int, edge_split: EdgeSplit | None = None):
    """Dispatch to the node or link trainer; see the per-task functions."""
    if task == "node":
        return finetune_node(tag, node_emb, encoder, codebook, options, seed)
    if task == "link":
        if edge_split is None:
            raise ValidationError("link task requires an edge split")
        return finetune_link(tag, edge_split, node_emb, encoder, codebook, options, seed)
    raise ValidationError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# exports

def write_history_csv(history: list[dict], path, config_hash: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "valid_metric"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def export_prototype_distances(state: ModelState, tag: Tag, node_emb: EmbeddingTable,
                               path, config_hash: str = "") -> None:
    """Per node: nearest prototype index and distance, for external plots."""
    adj = engine.as_tensor(
        normalized_adjacency(tag.indptr, tag.indices, np.arange(tag.num_nodes))
    )
    h = gcn_forward(state.encoder, engine.as_tensor(node_emb.vectors), adj).data
    protos = state.fusion.codebook.prototypes.astype(np.float64)
    d2 = (
        (h.astype(np.float64) ** 2).sum(axis=1, keepdims=True)
        + (protos**2).sum(axis=1, keepdims=True).T
        - 2.0 * h.astype(np.float64) @ protos.T
    )
    np.maximum(d2, 0.0, out=d2)
    idx = d2.argmin(axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["node_id", "nearest_prototype", "distance"])
        for v in range(tag.num_nodes):
            writer.writerow([v, int(idx[v]), float(np.sqrt(d2[v, idx[v]]))])
