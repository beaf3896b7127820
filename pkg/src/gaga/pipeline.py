"""Stage orchestration: artifacts on disk, config-hash lineage, locking.

Every stage reads its prerequisites from the run's output directory,
verifies that their embedded config hash matches the active config, and
writes its own artifacts plus a manifest entry. Stages are idempotent
given identical inputs and seed. One pipeline run owns its output
directory exclusively via a lock file.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np

from . import engine
from .aligner import AlignOptions, GcnEncoder, PrototypeCodebook, align_train
from .annograph import build_annotation_graph, load_annotation_graph, save_annotation_graph
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .downstream import (
    EvalReport,
    FinetuneOptions,
    FusionHead,
    ModelState,
    TaskHead,
    export_prototype_distances,
    finetune,
    write_history_csv,
)
from .errors import (
    ConfigError,
    MissingArtifactError,
    ProviderError,
    ValidationError,
)
from .graphs import (
    EdgeSplit,
    EmbeddingTable,
    Tag,
    VocabSpec,
    load_embeddings,
    load_tag,
    make_edge_split,
    save_embeddings,
    save_tag,
    synth_tag,
)
from .providers import (
    CostLedger,
    HashEmbedder,
    FileEmbedder,
    HttpAnnotator,
    HttpEmbedder,
    JsonlCache,
    MockAnnotator,
    annotate,
    edge_fields,
    load_annotations,
    load_template,
    node_fields,
    render_prompt,
    save_annotations,
)
from .rng import derive_seed, make_rng
from .selection import (
    SelectionResult,
    default_edge_budget,
    default_node_budget,
    kmeans,
    node_density_scores,
    select_edges,
    select_nodes,
)

log = logging.getLogger(__name__)

STAGES = (
    "synth",
    "select",
    "annotate",
    "build-anno-graph",
    "align",
    "finetune",
    "evaluate",
    "pipeline",
)

ARTIFACTS = {
    "tag_nodes": "tag.nodes.jsonl",
    "tag_edges": "tag.edges.txt",
    "node_embeddings": "embeddings.nodes.gemb",
    "selection": "selection.jsonl",
    "edge_split": "edge_split.json",
    "annotations": "annotations.jsonl",
    "annotation_failures": "annotation_failures.json",
    "cost": "cost.json",
    "annograph": "annograph",
    "align_ckpt": "align.ckpt",
    "align_log": "align.log.json",
    "model_ckpt": "model.ckpt",
    "eval_report": "eval_report.json",
    "gauges": "gauges.json",
    "history": "history.csv",
    "prototype_distances": "prototype_distances.csv",
    "sweep": "sweep.csv",
    "config": "config.resolved.cfg",
    "manifest": "manifest.json",
}


def artifact_path(out_dir, name: str) -> Path:
    return Path(out_dir) / ARTIFACTS[name]


# ---------------------------------------------------------------------------
# locking and manifest

class OutputLock:
    """Exclusive ownership of an output directory for one run."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / "run.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory is locked by another run ({self.path}); "
                "delete the lock file if that run is dead"
            )
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _load_manifest(out_dir) -> dict:
    path = artifact_path(out_dir, "manifest")
    if path.is_file():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"artifacts": {}}


def _record_artifacts(out_dir, cfg: RunConfig, names: list[str]) -> None:
    manifest = _load_manifest(out_dir)
    manifest["config_hash"] = cfg.hash()
    for name in names:
        manifest["artifacts"][name] = {
            "path": ARTIFACTS[name],
            "config_hash": cfg.hash(),
        }
    artifact_path(out_dir, "manifest").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    cfg.save(artifact_path(out_dir, "config"))


def _require(out_dir, name: str, cfg: RunConfig, stage_hint: str) -> Path:
    """Input artifact must exist and must have been produced by this config."""
    path = artifact_path(out_dir, name)
    if not path.exists():
        raise MissingArtifactError(
            f"missing prerequisite {path}; run the '{stage_hint}' stage first"
        )
    entry = _load_manifest(out_dir)["artifacts"].get(name)
    if entry and entry.get("config_hash") != cfg.hash():
        raise ConfigError(
            f"artifact {path} was produced by config {entry.get('config_hash')[:12]}..., "
            f"which does not match the active config {cfg.hash()[:12]}...; "
            "re-run earlier stages or restore the original config"
        )
    return path


# ---------------------------------------------------------------------------
# shared loaders

def _vocab_spec(cfg: RunConfig) -> VocabSpec:
    return VocabSpec(
        keywords_per_class=cfg["synth.keywords_per_class"],
        noise_words=cfg["synth.noise_words"],
        words_per_text=cfg["synth.words_per_text"],
        noise_prob=cfg["synth.noise_prob"],
    )


def _uses_synth(cfg: RunConfig) -> bool:
    return not cfg["data.node_file"]


def _load_tag(out_dir, cfg: RunConfig) -> Tag:
    if _uses_synth(cfg):
        nodes = _require(out_dir, "tag_nodes", cfg, "synth")
        edges = _require(out_dir, "tag_edges", cfg, "synth")
        return load_tag(nodes, edges)
    node_file = Path(cfg["data.node_file"])
    edge_file = Path(cfg["data.edge_file"])
    for path in (node_file, edge_file):
        if not path.is_file():
            raise MissingArtifactError(f"configured data file {path} does not exist")
    return load_tag(node_file, edge_file)


def _cache_dir(out_dir, cfg: RunConfig) -> Path:
    configured = cfg["cache_dir"] or os.environ.get("GAGA_CACHE_DIR", "")
    return Path(configured) if configured else Path(out_dir) / "cache"


def _build_embedder(cfg: RunConfig, out_dir):
    backend = cfg["embed.backend"]
    if backend == "hash":
        return HashEmbedder(dim=cfg["embed.dim"])
    if backend == "file":
        if not cfg["embed.file"]:
            raise ConfigError("embed.backend = file requires embed.file")
        return FileEmbedder(cfg["embed.file"])
    endpoint = cfg["embed.endpoint"] or os.environ.get("GAGA_EMBED_ENDPOINT", "")
    return HttpEmbedder(
        endpoint=endpoint,
        dim=cfg["embed.dim"],
        api_key=os.environ.get("GAGA_LLM_API_KEY", ""),
        model=cfg["embed.model"],
        cache_dir=_cache_dir(out_dir, cfg),
        retries=cfg["annotate.retries"],
    )


def _build_annotator(cfg: RunConfig, tag: Tag):
    if cfg["annotate.backend"] == "mock":
        if not (tag.labels >= 0).any():
            raise ValidationError("mock annotator needs labeled nodes")
        return MockAnnotator(labels=tag.labels, vocab=_vocab_spec(cfg), seed=cfg["seed"])
    endpoint = cfg["annotate.endpoint"] or os.environ.get("GAGA_LLM_ENDPOINT", "")
    return HttpAnnotator(
        endpoint=endpoint,
        api_key=os.environ.get("GAGA_LLM_API_KEY", ""),
        model=cfg["annotate.model"],
        temperature=cfg["annotate.temperature"],
        retries=cfg["annotate.retries"],
    )


def _load_node_embeddings(out_dir, cfg: RunConfig) -> EmbeddingTable:
    path = _require(out_dir, "node_embeddings", cfg, "select")
    return load_embeddings(path)


def _load_edge_split(out_dir, cfg: RunConfig) -> EdgeSplit:
    path = _require(out_dir, "edge_split", cfg, "select")
    obj = json.loads(path.read_text(encoding="utf-8"))
    if obj.get("config_hash") != cfg.hash():
        raise ConfigError(f"{path} was produced under a different config")
    return EdgeSplit.from_json(obj)


# ---------------------------------------------------------------------------
# stages

def stage_synth(cfg: RunConfig, out_dir) -> None:
    if not _uses_synth(cfg):
        raise ConfigError("synth stage is disabled when data.node_file is configured")
    tag = synth_tag(
        classes=cfg["synth.classes"],
        nodes_per_class=cfg["synth.nodes_per_class"],
        p_in=cfg["synth.p_in"],
        p_out=cfg["synth.p_out"],
        vocab=_vocab_spec(cfg),
        seed=cfg["seed"],
    )
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    save_tag(tag, artifact_path(out_dir, "tag_nodes"), artifact_path(out_dir, "tag_edges"),
             config_hash=cfg.hash())
    _record_artifacts(out_dir, cfg, ["tag_nodes", "tag_edges"])


def stage_select(cfg: RunConfig, out_dir) -> None:
    tag = _load_tag(out_dir, cfg)
    embedder = _build_embedder(cfg, out_dir)
    node_emb = embedder.embed_texts(tag.node_texts)
    save_embeddings(node_emb, artifact_path(out_dir, "node_embeddings"))

    clustering = kmeans(
        node_emb,
        k=min(cfg["select.clusters"], node_emb.count),
        max_iter=cfg["select.kmeans_iters"],
        seed=cfg["seed"],
    )
    scores = node_density_scores(node_emb, clustering)
    produced = ["node_embeddings", "selection"]

    if cfg["task"] == "link":
        split = make_edge_split(
            tag,
            (1.0 - cfg["edge_split.valid_fraction"] - cfg["edge_split.test_fraction"],
             cfg["edge_split.valid_fraction"], cfg["edge_split.test_fraction"]),
            negatives_per_edge=cfg["edge_split.negatives"],
            seed=cfg["seed"],
        )
        obj = {"config_hash": cfg.hash(), **split.to_json()}
        artifact_path(out_dir, "edge_split").write_text(
            json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8"
        )
        produced.append("edge_split")
        # annotate only edges the model may train on
        train_tag = tag.with_edges(split.train_pos)
        budget = cfg["select.edge_budget"] or default_edge_budget(train_tag.num_edges)
        selection = select_edges(train_tag, scores, budget)
    else:
        budget = default_node_budget(tag.num_nodes, cfg["select.node_fraction"])
        selection = select_nodes(node_emb, clustering, budget)

    selection.save_jsonl(artifact_path(out_dir, "selection"), config_hash=cfg.hash())
    _record_artifacts(out_dir, cfg, produced)


def stage_annotate(cfg: RunConfig, out_dir) -> None:
    tag = _load_tag(out_dir, cfg)
    selection, sel_hash = SelectionResult.load_jsonl(
        _require(out_dir, "selection", cfg, "select")
    )
    if sel_hash and sel_hash != cfg.hash():
        raise ConfigError("selection artifact was produced under a different config")

    node_template = load_template(cfg["annotate.template"])
    link_template = load_template(cfg["annotate.link_template"])
    categories = ", ".join(f"class {c}" for c in range(tag.num_classes))

    def render(target):
        if isinstance(target, tuple):
            u, v = target
            return render_prompt(
                link_template,
                edge_fields(tag.node_texts[u], tag.node_texts[v], categories),
            )
        return render_prompt(node_template, node_fields(tag.node_texts[target], categories))

    provider = _build_annotator(cfg, tag)
    cache = JsonlCache(_cache_dir(out_dir, cfg), "annotations-cache.jsonl")
    ledger = CostLedger(
        prompt_price_per_1k=cfg["annotate.prompt_price_per_1k"],
        completion_price_per_1k=cfg["annotate.completion_price_per_1k"],
    )
    records, failures = annotate(
        selection, render, provider, cache, tag.node_texts,
        parallelism=cfg["annotate.parallelism"], ledger=ledger,
    )
    save_annotations(records, artifact_path(out_dir, "annotations"), config_hash=cfg.hash())
    artifact_path(out_dir, "cost").write_text(
        json.dumps({"config_hash": cfg.hash(), **ledger.to_json()}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    produced = ["annotations", "cost"]
    if failures:
        artifact_path(out_dir, "annotation_failures").write_text(
            json.dumps({"config_hash": cfg.hash(), "failures": failures},
                       indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        produced.append("annotation_failures")
    _record_artifacts(out_dir, cfg, produced)
    if failures:
        raise ProviderError(
            f"{len(failures)} annotation target(s) failed permanently; "
            f"see {artifact_path(out_dir, 'annotation_failures')}"
        )


def stage_annograph(cfg: RunConfig, out_dir) -> None:
    records, ann_hash = load_annotations(_require(out_dir, "annotations", cfg, "annotate"))
    if ann_hash and ann_hash != cfg.hash():
        raise ConfigError("annotations artifact was produced under a different config")
    embedder = _build_embedder(cfg, out_dir)
    anno_emb = embedder.embed_texts([r.annotation_text for r in records])
    knn_k = cfg["annograph.knn"]
    if knn_k >= len(records):
        # small annotation budgets cannot support the configured k
        knn_k = max(1, len(records) - 1)
        log.warning("annograph.knn clamped to %d for %d annotations", knn_k, len(records))
    graph = build_annotation_graph(records, anno_emb, knn_k=knn_k)
    save_annotation_graph(graph, artifact_path(out_dir, "annograph"), config_hash=cfg.hash())
    _record_artifacts(out_dir, cfg, ["annograph"])


def _align_options(cfg: RunConfig) -> AlignOptions:
    return AlignOptions(
        alpha=cfg["align.alpha"],
        num_prototypes=cfg["align.prototypes"],
        hops=cfg["align.hops"],
        node_cap=cfg["align.node_cap"],
        epochs=cfg["align.epochs"],
        batch_size=cfg["align.batch_size"],
        lr=cfg["align.lr"],
        hidden_dim=cfg["align.hidden_dim"],
        num_layers=cfg["align.layers"],
        ema_decay=cfg["align.ema_decay"],
    )


def stage_align(cfg: RunConfig, out_dir) -> None:
    tag = _load_tag(out_dir, cfg)
    node_emb = _load_node_embeddings(out_dir, cfg)
    selection, _ = SelectionResult.load_jsonl(_require(out_dir, "selection", cfg, "select"))
    graph, graph_hash = load_annotation_graph(
        _require(out_dir, "annograph", cfg, "build-anno-graph")
    )
    if graph_hash and graph_hash != cfg.hash():
        raise ConfigError("annotation graph was produced under a different config")

    encoder, codebook, log = align_train(
        tag, graph, selection, node_emb, _align_options(cfg), seed=cfg["seed"]
    )
    arrays = encoder.copy_arrays()
    arrays["prototypes"] = codebook.prototypes
    arrays["ema_counts"] = codebook.ema_counts
    save_checkpoint(
        artifact_path(out_dir, "align_ckpt"),
        arrays,
        extra={
            "config_hash": cfg.hash(),
            "num_layers": len(encoder.layers),
            "ema_decay": codebook.decay,
        },
    )
    artifact_path(out_dir, "align_log").write_text(
        json.dumps({"config_hash": cfg.hash(), "epochs": log}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    _record_artifacts(out_dir, cfg, ["align_ckpt", "align_log"])


def _encoder_from_arrays(arrays: dict, num_layers: int) -> GcnEncoder:
    return GcnEncoder(
        adapter=engine.parameter(arrays["adapter"]),
        layers=[engine.parameter(arrays[f"layer{i}"]) for i in range(num_layers)],
    )


def _load_align_artifacts(out_dir, cfg: RunConfig) -> tuple[GcnEncoder, PrototypeCodebook]:
    path = _require(out_dir, "align_ckpt", cfg, "align")
    arrays, extra = load_checkpoint(path)
    if extra.get("config_hash") != cfg.hash():
        raise ConfigError(f"alignment checkpoint {path} was produced under a different config")
    encoder = _encoder_from_arrays(arrays, int(extra["num_layers"]))
    codebook = PrototypeCodebook(
        prototypes=arrays["prototypes"],
        ema_counts=arrays["ema_counts"].astype(np.float64),
        decay=float(extra.get("ema_decay", cfg["align.ema_decay"])),
        _reseed_rng=make_rng(cfg["seed"], "codebook", "reseed"),
    )
    return encoder, codebook


def _finetune_options(cfg: RunConfig) -> FinetuneOptions:
    return FinetuneOptions(
        lr=cfg["finetune.lr"],
        epochs=cfg["finetune.epochs"],
        patience=cfg["finetune.patience"],
        d_k=cfg["finetune.dk"],
        residual=cfg["finetune.residual"],
        hidden_dim=cfg["align.hidden_dim"],
        num_layers=cfg["align.layers"],
        num_prototypes=cfg["align.prototypes"],
    )


def stage_finetune(cfg: RunConfig, out_dir) -> None:
    tag = _load_tag(out_dir, cfg)
    node_emb = _load_node_embeddings(out_dir, cfg)
    encoder, codebook = _load_align_artifacts(out_dir, cfg)
    edge_split = _load_edge_split(out_dir, cfg) if cfg["task"] == "link" else None

    state, report, history = finetune(
        tag, node_emb, encoder, codebook, cfg["task"], _finetune_options(cfg),
        seed=cfg["seed"], edge_split=edge_split,
    )
    _save_model(out_dir, cfg, state, report)
    write_history_csv(history, artifact_path(out_dir, "history"), config_hash=cfg.hash())
    export_prototype_distances(
        state, tag, node_emb, artifact_path(out_dir, "prototype_distances"),
        config_hash=cfg.hash(),
    )
    _write_report(out_dir, cfg, report)
    _record_artifacts(
        out_dir, cfg,
        ["model_ckpt", "eval_report", "gauges", "history", "prototype_distances"],
    )


def _save_model(out_dir, cfg: RunConfig, state: ModelState, report: EvalReport) -> None:
    arrays = {name: p.data for name, p in state.params().items()}
    arrays["codebook.prototypes"] = state.fusion.codebook.prototypes
    arrays["codebook.ema_counts"] = state.fusion.codebook.ema_counts
    if state.adam_state is not None:
        for name, m in state.adam_state.m.items():
            arrays[f"adam.m.{name}"] = m
        for name, v in state.adam_state.v.items():
            arrays[f"adam.v.{name}"] = v
    save_checkpoint(
        artifact_path(out_dir, "model_ckpt"),
        arrays,
        extra={
            "config_hash": cfg.hash(),
            "task": report.task,
            "num_layers": cfg["align.layers"],
            "d_k": state.fusion.d_k,
            "residual": state.fusion.residual,
            "best_epoch": report.best_epoch,
            "epochs_trained": report.epochs_trained,
        },
    )


def _write_report(out_dir, cfg: RunConfig, report: EvalReport) -> None:
    obj = {"config_hash": cfg.hash(), **report.to_json()}
    artifact_path(out_dir, "eval_report").write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    gauges = {"config_hash": cfg.hash(), **report.gauges()}
    artifact_path(out_dir, "gauges").write_text(
        json.dumps(gauges, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _model_from_checkpoint(out_dir, cfg: RunConfig) -> tuple[ModelState, dict]:
    path = _require(out_dir, "model_ckpt", cfg, "finetune")
    arrays, extra = load_checkpoint(path)
    if extra.get("config_hash") != cfg.hash():
        raise ConfigError(f"model checkpoint {path} was produced under a different config")
    encoder = GcnEncoder(
        adapter=engine.parameter(arrays["encoder.adapter"]),
        layers=[engine.parameter(arrays[f"encoder.layer{i}"])
                for i in range(int(extra["num_layers"]))],
    )
    codebook = PrototypeCodebook(
        prototypes=arrays["codebook.prototypes"],
        ema_counts=arrays["codebook.ema_counts"].astype(np.float64),
        decay=cfg["align.ema_decay"],
    )
    fusion = FusionHead(
        w_q=engine.parameter(arrays["fusion.w_q"]),
        w_k=engine.parameter(arrays["fusion.w_k"]),
        w_v=engine.parameter(arrays["fusion.w_v"]),
        codebook=codebook,
        d_k=int(extra["d_k"]),
        residual=bool(extra.get("residual", False)),
    )
    task = extra["task"]
    if task == "node":
        head = TaskHead(task="node", weight=engine.parameter(arrays["head.weight"]),
                        bias=engine.parameter(arrays["head.bias"]))
    else:
        head = TaskHead(task="link", weight=engine.parameter(arrays["head.weight"]))
    return ModelState(encoder=encoder, fusion=fusion, head=head), extra


def stage_evaluate(cfg: RunConfig, out_dir) -> None:
    """Recompute the evaluation report from the saved model checkpoint."""
    from .downstream import forward_fused, split_accuracy, link_eval, class_logits
    from .aligner import normalized_adjacency

    tag = _load_tag(out_dir, cfg)
    node_emb = _load_node_embeddings(out_dir, cfg)
    state, extra = _model_from_checkpoint(out_dir, cfg)

    features = engine.as_tensor(node_emb.vectors)
    if extra["task"] == "node":
        adj = engine.as_tensor(
            normalized_adjacency(tag.indptr, tag.indices, np.arange(tag.num_nodes))
        )
        logits = class_logits(forward_fused(state, features, adj), state.head).data
        metrics = {
            name: {"accuracy": split_accuracy(logits, tag.labels, tag.split == code)}
            for code, name in enumerate(("train", "valid", "test"))
        }
    else:
        split = _load_edge_split(out_dir, cfg)
        train_tag = tag.with_edges(split.train_pos)
        adj = engine.as_tensor(
            normalized_adjacency(train_tag.indptr, train_tag.indices,
                                 np.arange(train_tag.num_nodes))
        )
        valid_mrr, valid_auc = link_eval(state, features, adj, split.valid_pos,
                                          split.valid_neg)
        test_mrr, test_auc = link_eval(state, features, adj, split.test_pos,
                                        split.test_neg)
        metrics = {
            "valid": {"mrr_at_10": valid_mrr, "auc": valid_auc},
            "test": {"mrr_at_10": test_mrr, "auc": test_auc},
        }
    report = EvalReport(
        task=extra["task"],
        metrics=metrics,
        best_epoch=int(extra.get("best_epoch", 0)),
        epochs_trained=int(extra.get("epochs_trained", 0)),
    )
    _write_report(out_dir, cfg, report)
    _record_artifacts(out_dir, cfg, ["eval_report", "gauges"])


_STAGE_FUNCS = {
    "synth": stage_synth,
    "select": stage_select,
    "annotate": stage_annotate,
    "build-anno-graph": stage_annograph,
    "align": stage_align,
    "finetune": stage_finetune,
    "evaluate": stage_evaluate,
}


def run_pipeline(cfg: RunConfig, out_dir) -> None:
    order = ["select", "annotate", "build-anno-graph", "align", "finetune", "evaluate"]
    if _uses_synth(cfg):
        order.insert(0, "synth")
    for stage in order:
        _STAGE_FUNCS[stage](cfg, out_dir)


def run_stage(stage: str, cfg: RunConfig, out_dir) -> None:
    """Entry point used by the CLI; holds the output lock for the duration."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with OutputLock(out_dir):
        if stage == "pipeline":
            run_pipeline(cfg, out_dir)
        else:
            _STAGE_FUNCS[stage](cfg, out_dir)


# ---------------------------------------------------------------------------
# sweeps

def _metric_of(report: dict) -> tuple[float, float]:
    metrics = report["metrics"]
    if report["task"] == "node":
        return metrics["valid"]["accuracy"], metrics["test"]["accuracy"]
    return metrics["valid"]["mrr_at_10"], metrics["test"]["mrr_at_10"]


def run_sweep(cfg: RunConfig, out_dir, key: str, values: list[str]) -> Path:
    """Full sub-pipelines, one per value; summarized into sweep.csv."""
    from .config import ALIASES

    full_key = ALIASES.get(key, key)
    rows = []
    for raw in values:
        sub_cfg = cfg.copy_with({full_key: raw})
        label = f"{key}={raw}"
        sub_out = Path(out_dir) / "sweep" / label
        sub_out.mkdir(parents=True, exist_ok=True)
        with OutputLock(sub_out):
            run_pipeline(sub_cfg, sub_out)
        report = json.loads(
            artifact_path(sub_out, "eval_report").read_text(encoding="utf-8")
        )
        valid_metric, test_metric = _metric_of(report)
        rows.append((raw, valid_metric, test_metric))

    path = artifact_path(out_dir, "sweep")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash()}\n")
        fh.write(f"{key},valid_metric,test_metric\n")
        for raw, vm, tm in rows:
            fh.write(f"{raw},{vm},{tm}\n")
    return path
