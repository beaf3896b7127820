"""Text-attributed graphs: loading, validation, synthesis, persistence.

A :class:`Tag` couples an undirected CSR adjacency with per-node text,
optional class labels, and train/valid/test split tags. On disk a graph
is a JSON-lines node file ({id, text, label?, split?}) plus a
whitespace-separated edge list; both are trivially hand-authorable.
Graphs are treated as undirected everywhere: reversed and duplicate
edges merge on load and self-loops are dropped (the GCN normalizer adds
its own transient self-loops).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ValidationError
from .rng import make_rng

SPLIT_NAMES = ("train", "valid", "test")
NO_SPLIT = -1
NO_LABEL = -1


def _build_csr(num_nodes: int, pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric, deduplicated, self-loop-free CSR from an (m, 2) pair array."""
    if pairs.size == 0:
        return np.zeros(num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    both = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    both = both[both[:, 0] != both[:, 1]]
    if both.size == 0:
        return np.zeros(num_nodes + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    keys = both[:, 0] * num_nodes + both[:, 1]
    keys = np.unique(keys)
    src = keys // num_nodes
    dst = keys % num_nodes
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    return indptr, dst.astype(np.int64)


@dataclass
class Tag:
    """A text-attributed graph with labels and splits.

    Adjacency is stored symmetric and deduplicated with sorted neighbor
    lists and no self-loops. Splits partition exactly the labeled nodes.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    node_texts: list[str]
    labels: np.ndarray
    num_classes: int
    split: np.ndarray

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        n = self.num_nodes
        if len(self.node_texts) != n:
            raise ValidationError(
                f"node_texts has {len(self.node_texts)} entries for {n} nodes"
            )
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0:
            raise ValidationError("malformed CSR indptr")
        if self.indptr[-1] != len(self.indices):
            raise ValidationError("CSR indptr does not cover indices")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValidationError("CSR neighbor index out of range")
        for v in range(n):
            nbrs = self.neighbors(v)
            if np.any(nbrs == v):
                raise ValidationError(f"self-loop stored at node {v}")
            if np.any(np.diff(nbrs) <= 0):
                raise ValidationError(f"neighbor list of node {v} not strictly ascending")
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValidationError("labels/split arrays must have one entry per node")
        labeled = self.labels != NO_LABEL
        if np.any((self.labels[labeled] < 0) | (self.labels[labeled] >= self.num_classes)):
            raise ValidationError(f"label outside [0, {self.num_classes})")
        if np.any(self.split[labeled] == NO_SPLIT) or np.any(self.split[~labeled] != NO_SPLIT):
            raise ValidationError("splits must partition exactly the labeled nodes")
        # symmetry
        rev = set()
        for v in range(n):
            for u in self.neighbors(v):
                rev.add((int(u), int(v)))
        for v in range(n):
            for u in self.neighbors(v):
                if (int(v), int(u)) not in rev:
                    raise ValidationError(f"asymmetric edge {v}->{u}")

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def degree(self, v: int) -> int:
        return int(self.indptr[v + 1] - self.indptr[v])

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    def edge_array(self) -> np.ndarray:
        """Undirected edges as an (m, 2) array with i < j, lexicographic order."""
        out = []
        for v in range(self.num_nodes):
            for u in self.neighbors(v):
                if v < u:
                    out.append((v, int(u)))
        return np.asarray(out, dtype=np.int64).reshape(-1, 2)

    def has_edge(self, u: int, v: int) -> bool:
        return bool(np.isin(v, self.neighbors(u)))

    def with_edges(self, pairs: np.ndarray) -> "Tag":
        """Same nodes/labels/splits, adjacency rebuilt from the given pairs."""
        indptr, indices = _build_csr(self.num_nodes, np.asarray(pairs, dtype=np.int64))
        return Tag(
            num_nodes=self.num_nodes,
            indptr=indptr,
            indices=indices,
            node_texts=list(self.node_texts),
            labels=self.labels.copy(),
            num_classes=self.num_classes,
            split=self.split.copy(),
        )


def make_tag(num_nodes: int, pairs, node_texts, labels=None, num_classes: int = 0,
             split=None) -> Tag:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (pairs.min() < 0 or pairs.max() >= num_nodes):
        bad = pairs[(pairs < 0).any(axis=1) | (pairs >= num_nodes).any(axis=1)][0]
        raise ValidationError(
            f"edge ({bad[0]} {bad[1]}) has an endpoint outside [0, {num_nodes})"
        )
    indptr, indices = _build_csr(num_nodes, pairs)
    if labels is None:
        labels = np.full(num_nodes, NO_LABEL, dtype=np.int64)
    if split is None:
        split = np.full(num_nodes, NO_SPLIT, dtype=np.int64)
    return Tag(
        num_nodes=num_nodes,
        indptr=indptr,
        indices=indices,
        node_texts=list(node_texts),
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=num_classes,
        split=np.asarray(split, dtype=np.int64),
    )


def load_tag(node_file, edge_file) -> Tag:
    """Parse and validate the JSONL node file + edge list pair."""
    node_file, edge_file = Path(node_file), Path(edge_file)
    texts: dict[int, str] = {}
    labels: dict[int, int] = {}
    splits: dict[int, int] = {}
    max_label = -1
    with open(node_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{node_file}:{lineno}: invalid JSON ({exc})") from exc
            if isinstance(rec, dict) and "id" not in rec and "config_hash" in rec:
                continue  # provenance header
            if not isinstance(rec, dict) or "id" not in rec or "text" not in rec:
                raise ValidationError(f"{node_file}:{lineno}: need 'id' and 'text' fields")
            nid = int(rec["id"])
            if nid in texts:
                raise ValidationError(f"{node_file}:{lineno}: duplicate node id {nid}")
            texts[nid] = str(rec["text"])
            if "label" in rec and rec["label"] is not None:
                labels[nid] = int(rec["label"])
                max_label = max(max_label, labels[nid])
                if "split" in rec and rec["split"] is not None:
                    if rec["split"] not in SPLIT_NAMES:
                        raise ValidationError(
                            f"{node_file}:{lineno}: unknown split {rec['split']!r}"
                        )
                    splits[nid] = SPLIT_NAMES.index(rec["split"])
                else:
                    raise ValidationError(
                        f"{node_file}:{lineno}: labeled node {nid} is missing a split"
                    )
            elif "split" in rec and rec["split"] is not None:
                raise ValidationError(
                    f"{node_file}:{lineno}: split on unlabeled node {nid}"
                )
    n = len(texts)
    if n == 0:
        raise ValidationError(f"{node_file}: no nodes")
    if sorted(texts) != list(range(n)):
        raise ValidationError(f"{node_file}: node ids must be exactly 0..{n - 1}")

    pairs = []
    with open(edge_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValidationError(f"{edge_file}:{lineno}: expected 'src dst'")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ValidationError(f"{edge_file}:{lineno}: non-integer endpoint") from exc
            if not (0 <= u < n and 0 <= v < n):
                raise ValidationError(
                    f"{edge_file}:{lineno}: edge ({u} {v}) dangles outside [0, {n})"
                )
            pairs.append((u, v))

    num_classes = max_label + 1 if max_label >= 0 else 0
    label_arr = np.full(n, NO_LABEL, dtype=np.int64)
    split_arr = np.full(n, NO_SPLIT, dtype=np.int64)
    for nid, lab in labels.items():
        label_arr[nid] = lab
    for nid, sp in splits.items():
        split_arr[nid] = sp
    return make_tag(
        n,
        np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
        [texts[i] for i in range(n)],
        labels=label_arr,
        num_classes=num_classes,
        split=split_arr,
    )


def save_tag(tag: Tag, node_file, edge_file, config_hash: str = "") -> None:
    """Canonical on-disk form; load(save(tag)) is identity.

    A non-empty config_hash is embedded as a header line in the node
    file and a comment in the edge file; both are skipped on load.
    """
    with open(node_file, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(json.dumps({"kind": "tag-nodes", "config_hash": config_hash}) + "\n")
        for i in range(tag.num_nodes):
            rec: dict = {"id": i, "text": tag.node_texts[i]}
            if tag.labels[i] != NO_LABEL:
                rec["label"] = int(tag.labels[i])
                rec["split"] = SPLIT_NAMES[tag.split[i]]
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    with open(edge_file, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        for u, v in tag.edge_array():
            fh.write(f"{u} {v}\n")


# ---------------------------------------------------------------------------
# synthetic graphs

@dataclass
class VocabSpec:
    """Controls the keyword-bag texts of synthetic nodes."""

    keywords_per_class: int = 8
    noise_words: int = 120
    words_per_text: int = 24
    noise_prob: float = 0.5

    def class_keywords(self, cls: int) -> list[str]:
        return [f"kw{cls}x{t}" for t in range(self.keywords_per_class)]


def synth_tag(classes: int, nodes_per_class: int, p_in: float, p_out: float,
              vocab: VocabSpec, seed: int) -> Tag:
    """Stochastic-block-model graph with class-keyword texts.

    Each unordered pair draws an edge with probability p_in (same class)
    or p_out (different class). Node text is `words_per_text` tokens,
    each a shared noise token with probability `noise_prob`, otherwise a
    keyword of the node's class. Splits are stratified 60/20/20 within
    each class. Everything is a pure function of the seed.
    """
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValidationError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in} p_out={p_out}")
    if classes < 1 or nodes_per_class < 1:
        raise ValidationError("classes and nodes_per_class must be positive")
    n = classes * nodes_per_class
    labels = np.repeat(np.arange(classes), nodes_per_class).astype(np.int64)

    rng_edges = make_rng(seed, "synth", "edges")
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    probs = np.where(same, p_in, p_out)
    keep = rng_edges.random(len(iu)) < probs
    pairs = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)

    rng_text = make_rng(seed, "synth", "texts")
    noise_vocab = [f"filler{t}" for t in range(vocab.noise_words)]
    texts = []
    for v in range(n):
        kws = vocab.class_keywords(int(labels[v]))
        words = []
        for _ in range(vocab.words_per_text):
            if rng_text.random() < vocab.noise_prob:
                words.append(noise_vocab[int(rng_text.integers(len(noise_vocab)))])
            else:
                words.append(kws[int(rng_text.integers(len(kws)))])
        texts.append(" ".join(words))

    rng_split = make_rng(seed, "synth", "split")
    split = np.full(n, NO_SPLIT, dtype=np.int64)
    for c in range(classes):
        members = np.where(labels == c)[0]
        order = rng_split.permutation(members)
        m = len(order)
        n_train = int(0.6 * m)
        n_valid = int(0.2 * m)
        split[order[:n_train]] = 0
        split[order[n_train : n_train + n_valid]] = 1
        split[order[n_train + n_valid :]] = 2

    return make_tag(n, pairs, texts, labels=labels, num_classes=classes, split=split)


# ---------------------------------------------------------------------------
# edge splits for link prediction

@dataclass
class EdgeSplit:
    """Positive train/valid/test edges plus per-positive negative lists.

    Negatives are uniform non-edges of the full graph, duplicate-free
    within each candidate list. Valid/test positives are absent from the
    training adjacency.
    """

    train_pos: np.ndarray
    valid_pos: np.ndarray
    test_pos: np.ndarray
    valid_neg: np.ndarray  # (n_valid, K, 2)
    test_neg: np.ndarray  # (n_test, K, 2)

    @property
    def negatives_per_edge(self) -> int:
        for neg in (self.valid_neg, self.test_neg):
            if neg.size:
                return neg.shape[1]
        return 0

    def to_json(self) -> dict:
        return {
            "negatives_per_edge": self.negatives_per_edge,
            "train_pos": self.train_pos.tolist(),
            "valid_pos": self.valid_pos.tolist(),
            "test_pos": self.test_pos.tolist(),
            "valid_neg": self.valid_neg.tolist(),
            "test_neg": self.test_neg.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EdgeSplit":
        k = int(obj.get("negatives_per_edge", 0))

        def arr(key, shape):
            a = np.asarray(obj[key], dtype=np.int64)
            return a.reshape(shape) if a.size == 0 else a

        return cls(
            train_pos=arr("train_pos", (0, 2)),
            valid_pos=arr("valid_pos", (0, 2)),
            test_pos=arr("test_pos", (0, 2)),
            valid_neg=arr("valid_neg", (0, k, 2)),
            test_neg=arr("test_neg", (0, k, 2)),
        )


def make_edge_split(tag: Tag, fractions: tuple[float, float, float],
                    negatives_per_edge: int, seed: int) -> EdgeSplit:
    """Split undirected edges into train/valid/test and sample negatives.

    Rounding: valid and test take exactly floor(fraction * m) edges each;
    train gets the remainder. Each evaluation positive receives
    `negatives_per_edge` distinct uniform non-edges (checked against the
    full edge set).
    """
    if negatives_per_edge < 1:
        raise ContractError("negatives_per_edge must be >= 1")
    f_train, f_valid, f_test = fractions
    if min(fractions) < 0 or abs(f_train + f_valid + f_test - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be nonnegative and sum to 1, got {fractions}")
    edges = tag.edge_array()
    m = len(edges)
    n_valid = int(f_valid * m)
    n_test = int(f_test * m)
    if m - n_valid - n_test < 1 or (f_valid > 0 and n_valid == 0) or (f_test > 0 and n_test == 0):
        raise ValidationError(f"graph has too few edges ({m}) for fractions {fractions}")

    rng = make_rng(seed, "edge_split")
    order = rng.permutation(m)
    test_pos = edges[np.sort(order[:n_test])]
    valid_pos = edges[np.sort(order[n_test : n_test + n_valid])]
    train_pos = edges[np.sort(order[n_test + n_valid :])]

    existing = {(int(u), int(v)) for u, v in edges}
    n = tag.num_nodes
    max_pairs = n * (n - 1) // 2
    if max_pairs - m < negatives_per_edge:
        raise ValidationError("graph too dense to sample the requested negatives")

    def sample_negs(count: int) -> np.ndarray:
        out = np.zeros((count, negatives_per_edge, 2), dtype=np.int64)
        for i in range(count):
            chosen: set = set()
            while len(chosen) < negatives_per_edge:
                u = int(rng.integers(n))
                v = int(rng.integers(n))
                if u == v:
                    continue
                if u > v:
                    u, v = v, u
                if (u, v) in existing or (u, v) in chosen:
                    continue
                chosen.add((u, v))
            out[i] = sorted(chosen)
        return out

    valid_neg = sample_negs(len(valid_pos))
    test_neg = sample_negs(len(test_pos))
    return EdgeSplit(
        train_pos=train_pos,
        valid_pos=valid_pos,
        test_pos=test_pos,
        valid_neg=valid_neg,
        test_neg=test_neg,
    )


# ---------------------------------------------------------------------------
# embedding tables

GEMB_MAGIC = b"GEMB"
GEMB_VERSION = 1


@dataclass
class EmbeddingTable:
    """Row-major float32 vectors with provenance."""

    vectors: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValidationError("embedding table must be 2-D")
        if not np.all(np.isfinite(self.vectors)):
            raise ValidationError("embedding table contains non-finite values")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.vectors[i]


def save_embeddings(table: EmbeddingTable, path) -> None:
    """Binary layout: magic "GEMB", version u32, count u64, dim u32, then f32 rows."""
    with open(path, "wb") as fh:
        fh.write(GEMB_MAGIC)
        fh.write(struct.pack("<IQI", GEMB_VERSION, table.count, table.dim))
        fh.write(table.vectors.astype("<f4").tobytes())


def load_embeddings(path, provenance: str = "") -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if raw[:4] != GEMB_MAGIC:
        raise ValidationError(f"{path}: bad magic, not an embedding table")
    version, count, dim = struct.unpack_from("<IQI", raw, 4)
    if version != GEMB_VERSION:
        raise ValidationError(f"{path}: unsupported version {version}")
    body = raw[4 + 16 :]
    expected = 4 * count * dim
    if len(body) != expected:
        raise ValidationError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    vecs = np.frombuffer(body, dtype="<f4").reshape(count, dim).copy()
    return EmbeddingTable(vectors=vecs, provenance=provenance or str(path))
