"""Two-stage prior-art search over patent text spans."""

from .ann import AnnForest, AnnQueryBudget
from .corpus import (
    MetadataMapping,
    PatentDocument,
    SectionKind,
    SpanRecord,
    emit_bert_dataset,
    emit_gpt2_dataset,
    ingest,
    parse_tsv,
    split_spans,
)
from .embedding import EmbeddingStore, HashEmbedder, cosine, embed_hash, load_embeddings
from .engine import Engine, EngineConfig
from .lexical import BM25Params, LexicalIndex, tokenize
from .pipeline import Query, RerankResult, SearchComponents, SearchMode, evaluate_modes, search

__version__ = "0.1.0"
