"""Flat key-value run configuration with a schema and content hash.

The on-disk format is one ``key = value`` per line with ``#`` comments.
Every key is declared in the schema below with a type, a default, a
range check, and a provenance tag ("method default" for values fixed by
the published training setup, "artifact default" for choices this
implementation had to make). Unknown keys are rejected. The config hash
is the SHA-256 of the canonical serialization and is embedded in every
artifact a run produces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import ConfigError

SCHEMA_VERSION = 1

METHOD = "method default"
ARTIFACT = "artifact default"


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit(v) -> bool:
    return 0.0 <= v <= 1.0


def _any(_v) -> bool:
    return True


def _choice(*options: str) -> Callable:
    def check(v):
        return v in options

    check.options = options
    return check


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    check: Callable
    provenance: str
    help: str


_KEYS = [
    Key("schema_version", int, SCHEMA_VERSION, _positive, ARTIFACT, "config format version"),
    Key("seed", int, 7, _nonneg, ARTIFACT, "run-level seed; fully determines the run"),
    Key("task", str, "node", _choice("node", "link"), ARTIFACT, "downstream task"),
    Key("data.node_file", str, "", _any, ARTIFACT, "JSONL node file (empty: use synth)"),
    Key("data.edge_file", str, "", _any, ARTIFACT, "edge list file (empty: use synth)"),
    Key("synth.classes", int, 4, _positive, ARTIFACT, "synthetic graph class count"),
    Key("synth.nodes_per_class", int, 125, _positive, ARTIFACT, "synthetic nodes per class"),
    Key("synth.p_in", float, 0.08, _unit, ARTIFACT, "intra-class edge probability"),
    Key("synth.p_out", float, 0.01, _unit, ARTIFACT, "inter-class edge probability"),
    Key("synth.keywords_per_class", int, 8, _positive, ARTIFACT, "class keyword vocabulary"),
    Key("synth.noise_words", int, 120, _positive, ARTIFACT, "shared noise vocabulary"),
    Key("synth.words_per_text", int, 24, _positive, ARTIFACT, "tokens per node text"),
    Key("synth.noise_prob", float, 0.5, _unit, ARTIFACT, "probability a token is noise"),
    Key("select.node_fraction", float, 0.01, _unit, METHOD, "annotation budget as node fraction"),
    Key("select.edge_budget", int, 0, _nonneg, METHOD,
        "edge annotation budget; 0 means ceil(sqrt(num_edges))"),
    Key("select.clusters", int, 40, _positive, METHOD, "k-means cluster count"),
    Key("select.kmeans_iters", int, 100, _positive, ARTIFACT, "k-means iteration cap"),
    Key("embed.backend", str, "hash", _choice("hash", "file", "http"), ARTIFACT,
        "embedding provider"),
    Key("embed.dim", int, 64, _positive, ARTIFACT, "embedding dimension"),
    Key("embed.file", str, "", _any, ARTIFACT, "embedding table path (file backend)"),
    Key("embed.endpoint", str, "", _any, ARTIFACT,
        "embedding endpoint (http backend; or GAGA_EMBED_ENDPOINT)"),
    Key("embed.model", str, "", _any, ARTIFACT, "embedding model id (http backend)"),
    Key("annotate.backend", str, "mock", _choice("mock", "http"), ARTIFACT,
        "annotation provider"),
    Key("annotate.endpoint", str, "", _any, ARTIFACT,
        "chat-completion endpoint (or GAGA_LLM_ENDPOINT)"),
    Key("annotate.model", str, "", _any, ARTIFACT, "annotation model id"),
    Key("annotate.temperature", float, 0.0, _nonneg, ARTIFACT,
        "decoding temperature (0 for reproducibility)"),
    Key("annotate.retries", int, 3, _nonneg, ARTIFACT, "remote retry budget"),
    Key("annotate.parallelism", int, 4, _positive, ARTIFACT, "bounded provider parallelism"),
    Key("annotate.template", str, "generic", _any, ARTIFACT, "node prompt template id"),
    Key("annotate.link_template", str, "generic-link", _any, ARTIFACT,
        "edge prompt template id"),
    Key("annotate.prompt_price_per_1k", float, 0.0, _nonneg, ARTIFACT,
        "prompt token price for the cost ledger"),
    Key("annotate.completion_price_per_1k", float, 0.0, _nonneg, ARTIFACT,
        "completion token price for the cost ledger"),
    Key("cache_dir", str, "", _any, ARTIFACT,
        "annotation/embedding cache (or GAGA_CACHE_DIR; default <out>/cache)"),
    Key("annograph.knn", int, 5, _positive, ARTIFACT,
        "annotation-graph neighbors per node (unspecified by the method; artifact choice)"),
    Key("align.alpha", float, 0.6, _unit, METHOD, "prototype/pair loss trade-off"),
    Key("align.prototypes", int, 40, _positive, METHOD, "codebook size"),
    Key("align.hops", int, 2, _positive, METHOD, "subgraph radius"),
    Key("align.node_cap", int, 256, _positive, ARTIFACT, "subgraph node cap"),
    Key("align.epochs", int, 200, _nonneg, ARTIFACT, "alignment epochs"),
    Key("align.batch_size", int, 32, _positive, ARTIFACT, "alignment batch size"),
    Key("align.lr", float, 5e-5, _positive, METHOD, "alignment learning rate"),
    Key("align.hidden_dim", int, 64, _positive, ARTIFACT, "GCN hidden width"),
    Key("align.layers", int, 4, _positive, METHOD, "GCN depth"),
    Key("align.ema_decay", float, 0.99, _unit, ARTIFACT, "codebook EMA decay"),
    Key("finetune.lr", float, 1e-3, _positive, METHOD, "fine-tune learning rate"),
    Key("finetune.epochs", int, 200, _nonneg, ARTIFACT, "fine-tune epoch cap"),
    Key("finetune.patience", int, 20, _positive, ARTIFACT, "early-stop patience"),
    Key("finetune.dk", int, 0, _nonneg, ARTIFACT,
        "attention projection width; 0 means embedding dim"),
    Key("finetune.residual", bool, False, _any, ARTIFACT,
        "add a residual around cross-attention (off per the published formula)"),
    Key("edge_split.valid_fraction", float, 0.1, _unit, ARTIFACT, "validation edge fraction"),
    Key("edge_split.test_fraction", float, 0.1, _unit, ARTIFACT, "test edge fraction"),
    Key("edge_split.negatives", int, 50, _positive, ARTIFACT,
        "negative candidates per evaluation edge"),
]

SCHEMA: dict[str, Key] = {k.name: k for k in _KEYS}

# short CLI/sweep aliases
ALIASES = {
    "alpha": "align.alpha",
    "kp": "align.prototypes",
    "hops": "align.hops",
    "budget": "select.node_fraction",
    "seed": "seed",
}


def _parse_value(key: Key, raw: str):
    raw = raw.strip()
    try:
        if key.type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if key.type is int:
            return int(raw)
        if key.type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key.name}: cannot parse {raw!r} as {key.type.__name__}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Validated run configuration; behaves like a typed mapping."""

    def __init__(self, values: dict | None = None):
        self._values = {name: key.default for name, key in SCHEMA.items()}
        if values:
            for name, value in values.items():
                self.set(name, value)
        self.validate()

    def __getitem__(self, name: str):
        if name not in SCHEMA:
            raise ConfigError(f"unknown config key {name!r}")
        return self._values[name]

    def set(self, name: str, value) -> None:
        name = ALIASES.get(name, name)
        if name not in SCHEMA:
            raise ConfigError(f"unknown config key {name!r}")
        key = SCHEMA[name]
        if isinstance(value, str) and key.type is not str:
            value = _parse_value(key, value)
        if key.type in (int, float) and isinstance(value, (int, float)) \
                and not isinstance(value, bool):
            value = key.type(value)
        if not isinstance(value, key.type):
            raise ConfigError(
                f"{name}: expected {key.type.__name__}, got {type(value).__name__}"
            )
        self._values[name] = value

    def validate(self) -> None:
        for name, key in SCHEMA.items():
            value = self._values[name]
            if not key.check(value):
                options = getattr(key.check, "options", None)
                hint = f" (one of {', '.join(options)})" if options else ""
                raise ConfigError(f"{name} = {value!r} is out of range{hint}")
        if self._values["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version {self._values['schema_version']} != {SCHEMA_VERSION}"
            )
        if self._values["edge_split.valid_fraction"] + self._values["edge_split.test_fraction"] >= 1:
            raise ConfigError("edge split fractions must leave room for training edges")

    def serialize(self) -> str:
        """Canonical text form; parse(serialize()) is the identity."""
        lines = [f"{name} = {_format_value(self._values[name])}" for name in sorted(SCHEMA)]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def copy_with(self, overrides: dict) -> "RunConfig":
        merged = dict(self._values)
        cfg = RunConfig()
        cfg._values = merged
        for name, value in overrides.items():
            cfg.set(name, value)
        cfg.validate()
        return cfg

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
            name, raw = stripped.split("=", 1)
            name = name.strip()
            if name not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
            if name in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {name!r}")
            values[name] = _parse_value(SCHEMA[name], raw)
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.parse(path.read_text(encoding="utf-8"), source=str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")


def describe_keys() -> list[str]:
    """One help line per key, with its provenance tag."""
    out = []
    for name in sorted(SCHEMA):
        key = SCHEMA[name]
        out.append(f"{name} (default {_format_value(key.default)}, {key.provenance}): {key.help}")
    return out
