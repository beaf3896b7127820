"""Pluggable embedding and annotation providers.

Embedding backends: a precomputed table on disk, a deterministic hashed
bag-of-tokens (the offline default), and a generic HTTP JSON endpoint.
Annotation backends: a generic chat-completion HTTP endpoint and a
deterministic mock that writes label-keyword summaries for synthetic
graphs. Remote calls retry with exponential backoff and everything is
cached content-addressed, so re-running a stage never re-bills.

Environment: GAGA_LLM_API_KEY, GAGA_LLM_ENDPOINT, GAGA_EMBED_ENDPOINT,
GAGA_CACHE_DIR (explicit configuration wins over the environment).
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
import requests

from .errors import ProviderError, ValidationError
from .graphs import EmbeddingTable, VocabSpec
from .selection import SelectionResult

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

BUILTIN_TEMPLATE_IDS = (
    "ogbn-arxiv",
    "tape-arxiv23",
    "cora",
    "pubmed",
    "link",
    "ogbn-products",
    "generic",
    "generic-link",
)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    dataset: str = ""

    @property
    def placeholders(self) -> tuple[str, ...]:
        seen = []
        for name in _PLACEHOLDER.findall(self.body):
            if name not in seen:
                seen.append(name)
        return tuple(seen)


def load_template(template_id: str) -> PromptTemplate:
    """Load one of the bundled templates, verbatim from its fixture file."""
    if template_id not in BUILTIN_TEMPLATE_IDS:
        raise ValidationError(
            f"unknown template {template_id!r}; available: {', '.join(BUILTIN_TEMPLATE_IDS)}"
        )
    body = (
        resources.files("gaga").joinpath(f"templates/{template_id}.txt").read_text("utf-8")
    )
    return PromptTemplate(template_id=template_id, body=body, dataset=template_id)


def render_prompt(template: PromptTemplate, fields: dict[str, str]) -> str:
    """Byte-exact placeholder substitution; nothing else is transformed."""

    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in fields:
            raise ValidationError(
                f"template {template.template_id!r} is missing a value for {{{name}}}"
            )
        return str(fields[name])

    return _PLACEHOLDER.sub(repl, template.body)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def split_title_abstract(text: str) -> tuple[str, str]:
    """Best-effort title/abstract fields from a single node text.

    Explicit "Title:" / "Abstract:" markers win; otherwise the first
    line is the title and the remainder the abstract.
    """
    t = re.search(r"Title:\s*(.*?)(?:\n|Abstract:|$)", text, flags=re.S)
    a = re.search(r"Abstract:\s*(.*?)(?:\n?Title:|$)", text, flags=re.S)
    if t and a:
        return t.group(1).strip(), a.group(1).strip()
    lines = text.splitlines() or [""]
    return lines[0].strip(), "\n".join(lines[1:]).strip()


def node_fields(text: str, categories: str = "") -> dict[str, str]:
    title, abstract = split_title_abstract(text)
    return {"text": text, "title": title, "abstract": abstract, "categories": categories}


def edge_fields(text_u: str, text_v: str, categories: str = "") -> dict[str, str]:
    fields = {"categories": categories}
    for k, text in (("1", text_u), ("2", text_v)):
        title, abstract = split_title_abstract(text)
        fields[f"text{k}"] = text
        fields[f"title{k}"] = title
        fields[f"abstract{k}"] = abstract
    return fields


# ---------------------------------------------------------------------------
# embedding backends

def _tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


class HashEmbedder:
    """Deterministic hashed bag-of-tokens embeddings.

    Each token maps to a fixed bucket and sign via blake2b, counts
    accumulate, and rows are L2-normalized. The same text always embeds
    to the same vector, independent of the run seed, so caches stay
    coherent across runs.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValidationError("hash embedder dim must be >= 1")
        self.dim = dim
        self.provider_id = f"hash-d{dim}"

    def embed_texts(self, texts: list[str]) -> EmbeddingTable:
        if not texts:
            raise ValidationError("embed requires a non-empty list of texts")
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            for tok in _tokenize(text):
                digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
                bucket = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] & 1 else -1.0
                out[i, bucket] += sign
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return EmbeddingTable(vectors=out.astype(np.float32), provenance=self.provider_id)


class FileEmbedder:
    """Precomputed embedding table on disk.

    With a sidecar ``<path>.keys`` file (one sha256 text hash per row)
    lookups are by content; otherwise rows are positional and the text
    count must match the table exactly.
    """

    def __init__(self, path):
        from .graphs import load_embeddings

        self.path = Path(path)
        self.table = load_embeddings(self.path)
        self.provider_id = f"file:{self.path.name}"
        keys_path = Path(str(self.path) + ".keys")
        self.key_to_row: dict[str, int] | None = None
        if keys_path.is_file():
            keys = keys_path.read_text(encoding="utf-8").split()
            if len(keys) != self.table.count:
                raise ValidationError(
                    f"{keys_path}: {len(keys)} keys for {self.table.count} rows"
                )
            self.key_to_row = {k: i for i, k in enumerate(keys)}

    @property
    def dim(self) -> int:
        return self.table.dim

    def embed_texts(self, texts: list[str]) -> EmbeddingTable:
        if not texts:
            raise ValidationError("embed requires a non-empty list of texts")
        if self.key_to_row is None:
            if len(texts) != self.table.count:
                raise ValidationError(
                    f"file backend is positional: {len(texts)} texts vs "
                    f"{self.table.count} stored rows"
                )
            vecs = self.table.vectors.copy()
        else:
            rows = []
            for text in texts:
                key = hashlib.sha256(text.encode("utf-8")).hexdigest()
                if key not in self.key_to_row:
                    raise ValidationError("file backend has no row for a requested text")
                rows.append(self.key_to_row[key])
            vecs = self.table.vectors[rows]
        return EmbeddingTable(vectors=vecs, provenance=self.provider_id)


def _post_with_retries(url: str, payload: dict, headers: dict, retries: int,
                       backoff_base: float, timeout: float) -> dict:
    last_err: Exception | None = None
    status = None
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff_base * (2 ** (attempt - 1)))
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
            status = resp.status_code
            if status == 429 or status >= 500:
                last_err = ProviderError(f"HTTP {status} from {url}", status=status)
                continue
            if status >= 400:
                raise ProviderError(f"HTTP {status} from {url}", status=status)
            return resp.json()
        except ProviderError:
            raise
        except (requests.RequestException, ValueError) as exc:
            last_err = exc
    raise ProviderError(
        f"retries exhausted calling {url}: {last_err}", status=status
    )


class HttpEmbedder:
    """Generic JSON embedding endpoint; results cached by text hash."""

    def __init__(self, endpoint: str, dim: int, api_key: str = "", model: str = "",
                 cache_dir=None, retries: int = 3, backoff_base: float = 0.5,
                 timeout: float = 30.0):
        if not endpoint:
            raise ValidationError("http embed backend needs an endpoint "
                                  "(config or GAGA_EMBED_ENDPOINT)")
        self.endpoint = endpoint
        self.dim = dim
        self.api_key = api_key
        self.model = model
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.provider_id = f"http:{endpoint}" + (f":{model}" if model else "")
        self._cache = JsonlCache(cache_dir, "embeddings-cache.jsonl") if cache_dir else None

    def _key(self, text: str) -> str:
        return f"{prompt_hash(text)}:{self.provider_id}:d{self.dim}"

    def embed_texts(self, texts: list[str]) -> EmbeddingTable:
        if not texts:
            raise ValidationError("embed requires a non-empty list of texts")
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        missing: list[int] = []
        for i, text in enumerate(texts):
            hit = self._cache.get(self._key(text)) if self._cache else None
            if hit is not None:
                out[i] = np.asarray(hit["vector"], dtype=np.float32)
            else:
                missing.append(i)
        if missing:
            headers = {"Content-Type": "application/json"}
            if self.api_key:
                headers["Authorization"] = f"Bearer {self.api_key}"
            payload: dict = {"texts": [texts[i] for i in missing]}
            if self.model:
                payload["model"] = self.model
            body = _post_with_retries(self.endpoint, payload, headers, self.retries,
                                      self.backoff_base, self.timeout)
            vectors = body.get("embeddings")
            if not isinstance(vectors, list) or len(vectors) != len(missing):
                raise ProviderError(
                    f"embedding endpoint returned {0 if vectors is None else len(vectors)} "
                    f"vectors for {len(missing)} texts"
                )
            for i, vec in zip(missing, vectors):
                arr = np.asarray(vec, dtype=np.float32)
                if arr.shape != (self.dim,):
                    raise ProviderError(
                        f"embedding dim {arr.shape} does not match declared {self.dim}"
                    )
                out[i] = arr
                if self._cache:
                    self._cache.put(self._key(texts[i]), {"vector": arr.tolist()})
        return EmbeddingTable(vectors=out, provenance=self.provider_id)


# ---------------------------------------------------------------------------
# annotation cache and records

class JsonlCache:
    """Append-only JSONL store keyed by content hash; no eviction."""

    def __init__(self, directory, filename: str):
        self.path = Path(directory) / filename
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._data: dict[str, dict] = {}
        if self.path.is_file():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    self._data[rec["key"]] = rec["value"]

    def get(self, key: str) -> dict | None:
        return self._data.get(key)

    def put(self, key: str, value: dict) -> None:
        self._data[key] = value
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"key": key, "value": value}, ensure_ascii=False) + "\n")

    def __len__(self) -> int:
        return len(self._data)


@dataclass
class AnnotationRecord:
    """One annotation for a node (int target) or edge ([i, j] target)."""

    target: object
    prompt_hash: str
    annotation_text: str
    provider_id: str
    created_at: str

    def __post_init__(self):
        if not self.annotation_text:
            raise ValidationError("annotation_text must be non-empty")

    def to_json(self) -> dict:
        target = (
            list(self.target) if isinstance(self.target, (tuple, list)) else int(self.target)
        )
        return {
            "target": target,
            "prompt_hash": self.prompt_hash,
            "annotation_text": self.annotation_text,
            "provider_id": self.provider_id,
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationRecord":
        target = obj["target"]
        if isinstance(target, list):
            target = (int(target[0]), int(target[1]))
        return cls(
            target=target,
            prompt_hash=obj["prompt_hash"],
            annotation_text=obj["annotation_text"],
            provider_id=obj["provider_id"],
            created_at=obj["created_at"],
        )


def save_annotations(records: list[AnnotationRecord], path, config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "annotations", "config_hash": config_hash}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


def load_annotations(path) -> tuple[list[AnnotationRecord], str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty annotation file")
    header = json.loads(lines[0])
    records = [AnnotationRecord.from_json(json.loads(line)) for line in lines[1:] if line]
    return records, header.get("config_hash", "")


# ---------------------------------------------------------------------------
# annotators

class MockAnnotator:
    """Offline annotator: a pure function of (target text, true label, seed).

    Emits the target's class keywords plus deterministic distractor
    tokens, mimicking a prediction-explanation-concepts response.
    """

    provider_id = "mock"

    def __init__(self, labels: np.ndarray, vocab: VocabSpec, seed: int,
                 class_names: list[str] | None = None):
        self.labels = np.asarray(labels)
        self.vocab = vocab
        self.seed = seed
        self.class_names = class_names

    def _name(self, cls: int) -> str:
        if self.class_names:
            return self.class_names[cls]
        return f"class {cls}"

    def _concepts(self, cls: int, salt: str, count: int = 8) -> list[str]:
        from .rng import make_rng

        kws = self.vocab.class_keywords(cls)
        rng = make_rng(self.seed, "mock", salt)
        picks = [kws[int(i)] for i in rng.integers(len(kws), size=count)]
        picks.append(f"filler{int(rng.integers(self.vocab.noise_words))}")
        return picks

    def annotate_target(self, target, prompt: str, texts: list[str]) -> str:
        if isinstance(target, tuple):
            u, v = target
            cu, cv = int(self.labels[u]), int(self.labels[v])
            cu_terms = " ".join(self._concepts(cu, f"{prompt}/{u}"))
            cv_terms = " ".join(self._concepts(cv, f"{prompt}/{v}"))
            return (
                f"These two nodes are related because both concern {self._name(cu)} "
                f"and {self._name(cv)} topics. Key concepts: {cu_terms} {cv_terms}. "
                f"Understanding them requires familiarity with {self._name(cu)} methods."
            )
        cls = int(self.labels[int(target)])
        terms = " ".join(self._concepts(cls, f"{prompt}/{target}"))
        return (
            f"Prediction: {self._name(cls)}. Key concepts: {terms}. "
            f"Knowledge needed: the vocabulary of {self._name(cls)} and how its "
            f"terms co-occur. Reasoning: the text repeats {terms.split()[0]}, "
            f"which marks {self._name(cls)}."
        )


class HttpAnnotator:
    """Generic chat-completion endpoint, temperature 0 by default."""

    def __init__(self, endpoint: str, api_key: str = "", model: str = "",
                 temperature: float = 0.0, retries: int = 3,
                 backoff_base: float = 0.5, timeout: float = 60.0):
        if not endpoint:
            raise ValidationError("http annotation backend needs an endpoint "
                                  "(config or GAGA_LLM_ENDPOINT)")
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.temperature = temperature
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.provider_id = f"llm:{model or endpoint}"

    def annotate_target(self, target, prompt: str, texts: list[str]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        body = _post_with_retries(self.endpoint, payload, headers, self.retries,
                                  self.backoff_base, self.timeout)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ProviderError(f"malformed completion payload from {self.endpoint}")
        if not text:
            raise ProviderError("provider returned an empty completion")
        return text


@dataclass
class CostLedger:
    """Token and money accounting; tokens are estimated as ceil(chars / 4)."""

    prompt_price_per_1k: float = 0.0
    completion_price_per_1k: float = 0.0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    cache_hits: int = 0

    def add_call(self, prompt: str, completion: str) -> None:
        self.calls += 1
        self.prompt_tokens += math.ceil(len(prompt) / 4)
        self.completion_tokens += math.ceil(len(completion) / 4)

    @property
    def cost(self) -> float:
        return (
            self.prompt_tokens / 1000.0 * self.prompt_price_per_1k
            + self.completion_tokens / 1000.0 * self.completion_price_per_1k
        )

    def to_json(self) -> dict:
        return {
            "calls": self.calls,
            "cache_hits": self.cache_hits,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "estimated_cost": self.cost,
        }


def annotate(selection: SelectionResult, render: Callable[[object], str], provider,
             cache: JsonlCache | None, texts: list[str], parallelism: int = 4,
             ledger: CostLedger | None = None,
             ) -> tuple[list[AnnotationRecord], list[dict]]:
    """Annotate every selected target, cache-first.

    Cached targets are returned verbatim with zero provider calls. Fresh
    calls may run with bounded parallelism, but output order is always
    selection order and cache appends happen in that order too. Permanent
    failures are collected into the returned error manifest instead of
    aborting the batch.
    """
    if not selection.items:
        raise ValidationError("annotate requires a non-empty selection")
    prompts = [render(target) for target in selection.items]
    hashes = [prompt_hash(p) for p in prompts]

    results: dict[int, AnnotationRecord] = {}
    failures: list[dict] = []
    todo: list[int] = []
    for i, target in enumerate(selection.items):
        key = f"{hashes[i]}:{provider.provider_id}"
        hit = cache.get(key) if cache is not None else None
        if hit is not None:
            results[i] = AnnotationRecord.from_json(hit)
            if ledger:
                ledger.cache_hits += 1
        else:
            todo.append(i)

    def run(i: int) -> AnnotationRecord:
        text = provider.annotate_target(selection.items[i], prompts[i], texts)
        if not text:
            raise ProviderError("provider returned an empty completion")
        return AnnotationRecord(
            target=selection.items[i],
            prompt_hash=hashes[i],
            annotation_text=text,
            provider_id=provider.provider_id,
            created_at=datetime.now(timezone.utc).isoformat(),
        )

    if todo:
        workers = max(1, min(parallelism, len(todo)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {i: pool.submit(run, i) for i in todo}
        for i in todo:
            try:
                rec = futures[i].result()
            except ProviderError as exc:
                failures.append({
                    "target": list(selection.items[i]) if isinstance(
                        selection.items[i], tuple) else int(selection.items[i]),
                    "error": str(exc),
                    "status": getattr(exc, "status", None),
                })
                continue
            results[i] = rec
            if ledger:
                ledger.add_call(prompts[i], rec.annotation_text)
            if cache is not None:
                cache.put(f"{hashes[i]}:{provider.provider_id}", rec.to_json())

    records = [results[i] for i in sorted(results)]
    return records, failures
