"""Budgeted annotation and graph alignment for text-attributed graphs.

Pipeline: select representative nodes or edges by information density,
annotate them through a pluggable LLM provider, wire the annotations
into a cosine-KNN graph, align it with the original graph through a
two-level contrastive objective over vector-quantized prototypes, and
fine-tune prototype-cross-attention heads for node classification or
link prediction.
"""

from .config import RunConfig
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    GagaError,
    MissingArtifactError,
    NumericsError,
    ProviderError,
    ShapeError,
    ValidationError,
)
from .graphs import EdgeSplit, EmbeddingTable, Tag, VocabSpec, load_tag, save_tag, synth_tag

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "GagaError",
    "ConfigError",
    "ContractError",
    "DegenerateInputError",
    "MissingArtifactError",
    "NumericsError",
    "ProviderError",
    "ShapeError",
    "ValidationError",
    "EdgeSplit",
    "EmbeddingTable",
    "Tag",
    "VocabSpec",
    "load_tag",
    "save_tag",
    "synth_tag",
    "__version__",
]
