"""Engine assembly, configuration and the on-disk index directory."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .ann import DEFAULT_LEAF_CAPACITY, DEFAULT_TREES, AnnForest
from .corpus import SectionKind, SpanRecord, count_by_kind
from .embedding import (
    DEFAULT_DIM,
    EmbedderDescriptor,
    EmbeddingStore,
    HashEmbedder,
    make_embedder,
)
from .lexical import BM25Params, LexicalIndex
from .pipeline import (
    DEFAULT_K_FINAL,
    DEFAULT_N_CANDIDATES,
    Query,
    RerankResult,
    SearchComponents,
    evaluate_modes,
    search,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
ENV_INDEX_DIR = "PRIORART_INDEX_DIR"
MANIFEST = "manifest.json"
SPANS_FILE = "spans.bin"
POSTINGS_FILE = "postings.bin"
EMBEDDINGS_FILE = "embeddings.bin"
FOREST_FILE = "forest.ann"


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AnnParams:
    n_trees: int = DEFAULT_TREES
    leaf_capacity: int = DEFAULT_LEAF_CAPACITY
    seed: int = 0


@dataclass(frozen=True)
class EngineConfig:
    index_dir: Path | None = None
    embedder: EmbedderDescriptor = field(default_factory=lambda: HashEmbedder(DEFAULT_DIM).descriptor)
    bm25: BM25Params = field(default_factory=BM25Params)
    ann: AnnParams = field(default_factory=AnnParams)
    n_candidates: int = DEFAULT_N_CANDIDATES
    k_final: int = DEFAULT_K_FINAL

    def __post_init__(self):
        counts = (self.ann.n_trees, self.ann.leaf_capacity, self.n_candidates, self.k_final)
        if min(counts) < 1:
            raise ValueError("all counts in the engine config must be positive")

    # flat JSON keys understood by from_mapping
    KEYS = (
        "index_dir",
        "embedder_kind",
        "embedder_name",
        "embedder_dim",
        "vectors_path",
        "k1",
        "b",
        "n_trees",
        "leaf_capacity",
        "seed",
        "n_candidates",
        "k_final",
    )

    @classmethod
    def from_mapping(cls, values: Mapping, base: "EngineConfig | None" = None) -> "EngineConfig":
        """Overlay flat key/value settings (``None`` values are ignored)."""
        unknown = set(values) - set(cls.KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        v = {k: x for k, x in values.items() if x is not None}
        cfg = base or cls()
        emb = cfg.embedder
        if {"embedder_kind", "embedder_name", "embedder_dim", "vectors_path"} & set(v):
            kind = v.get("embedder_kind", emb.kind)
            params = dict(emb.parameters)
            if "vectors_path" in v:
                params["path"] = str(v["vectors_path"])
                kind = v.get("embedder_kind", "file")
            name = v.get("embedder_name", emb.name if kind == emb.kind else ("file" if kind == "file" else "fnv-hash"))
            emb = EmbedderDescriptor(name, kind, int(v.get("embedder_dim", emb.dim)), params)
        return replace(
            cfg,
            index_dir=Path(v["index_dir"]) if "index_dir" in v else cfg.index_dir,
            embedder=emb,
            bm25=BM25Params(float(v.get("k1", cfg.bm25.k1)), float(v.get("b", cfg.bm25.b))),
            ann=AnnParams(
                int(v.get("n_trees", cfg.ann.n_trees)),
                int(v.get("leaf_capacity", cfg.ann.leaf_capacity)),
                int(v.get("seed", cfg.ann.seed)),
            ),
            n_candidates=int(v.get("n_candidates", cfg.n_candidates)),
            k_final=int(v.get("k_final", cfg.k_final)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike | None = None, overrides: Mapping | None = None, env=None) -> "EngineConfig":
        """Defaults, then the JSON file, then ``PRIORART_INDEX_DIR``, then flag overrides."""
        env = os.environ if env is None else env
        cfg = cls()
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
            if not isinstance(data, dict):
                raise ValueError(f"{path}: config must be a flat JSON object")
            cfg = cls.from_mapping(data, cfg)
        if env.get(ENV_INDEX_DIR):
            cfg = replace(cfg, index_dir=Path(env[ENV_INDEX_DIR]))
        if overrides:
            cfg = cls.from_mapping(overrides, cfg)
        return cfg


# --------------------------------------------------------------------------
# span store codec

_SPAN_MAGIC = b"PASPAN01"
_KINDS = list(SectionKind)


def spans_to_bytes(spans: Iterable[SpanRecord]) -> bytes:
    spans = list(spans)
    out = [_SPAN_MAGIC, struct.pack("<Q", len(spans))]
    for s in spans:
        pid = s.patent_id.encode("utf-8")
        text = s.text.encode("utf-8")
        out.append(struct.pack("<QBII", s.span_id, _KINDS.index(s.kind), s.ordinal, len(pid)))
        out.append(pid)
        out.append(struct.pack("<I", len(text)))
        out.append(text)
    return b"".join(out)


def spans_from_bytes(data: bytes) -> list[SpanRecord]:
    if data[:8] != _SPAN_MAGIC:
        raise IndexFormatError("not a span store file")
    try:
        (count,) = struct.unpack_from("<Q", data, 8)
        pos = 16
        spans = []
        for _ in range(count):
            span_id, kind, ordinal, plen = struct.unpack_from("<QBII", data, pos)
            pos += 17
            pid = data[pos : pos + plen].decode("utf-8")
            pos += plen
            (tlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            text = data[pos : pos + tlen].decode("utf-8")
            pos += tlen
            spans.append(SpanRecord(span_id, pid, _KINDS[kind], ordinal, text))
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise IndexFormatError(f"corrupt span store: {exc}") from exc
    if pos != len(data):
        raise IndexFormatError("trailing bytes in span store")
    return spans


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------


class Engine:
    """Loaded, immutable search components plus the config that built them."""

    def __init__(self, spans, index, store, forest, embedder, config: EngineConfig):
        self.spans = spans
        self.index = index
        self.store = store
        self.forest = forest
        self.embedder = embedder
        self.config = config
        self.components = SearchComponents(spans, index, store, embedder, forest)

    @classmethod
    def build(cls, spans: list[SpanRecord], config: EngineConfig | None = None, store: EmbeddingStore | None = None) -> "Engine":
        """Index ``spans``; vectors come from ``store`` or the configured hash embedder."""
        config = config or EngineConfig()
        t0 = time.perf_counter()
        index = LexicalIndex.build(spans, config.bm25)
        texts = {s.span_id: s.text for s in spans}
        if store is None:
            if config.embedder.kind != "hash":
                raise ValueError("a file embedder needs a vector store to build from")
            embedder = make_embedder(config.embedder)
            store = EmbeddingStore.from_texts(((s.span_id, s.text) for s in spans), embedder)
        else:
            config = replace(config, embedder=replace(config.embedder, dim=store.dim))
            embedder = make_embedder(config.embedder, store, texts)
        forest = None
        if len(store):
            forest = AnnForest.build(store, config.ann.n_trees, config.ann.leaf_capacity, config.ann.seed)
        logger.info("built engine over %d spans in %.2fs", len(spans), time.perf_counter() - t0)
        return cls(spans, index, store, forest, embedder, config)

    def search(self, query: Query) -> list[RerankResult]:
        return search(query, self.components)

    def query(self, text: str, mode="rerank", n: int | None = None, k: int | None = None, require=(), kinds=()) -> Query:
        return Query(
            text,
            mode,
            self.config.n_candidates if n is None else n,
            self.config.k_final if k is None else k,
            tuple(require),
            tuple(kinds),
        )

    def evaluate(self, queries, ground_truth, **kwargs) -> dict:
        return evaluate_modes(queries, ground_truth, self.components, **kwargs)

    def stats(self) -> dict:
        return {
            "documents": len({s.patent_id for s in self.spans}),
            "spans": len(self.spans),
            "spans_by_kind": count_by_kind(self.spans),
            "terms": len(self.index.postings),
            "avgdl": self.index.avgdl,
            "vectors": len(self.store),
        }

    # ------------------------------------------------------------------

    def save(self, index_dir: str | os.PathLike, overwrite: bool = False) -> Path:
        index_dir = Path(index_dir)
        if index_dir.exists() and any(index_dir.iterdir()):
            if not overwrite:
                raise FileExistsError(f"{index_dir} is not empty (use --overwrite to replace it)")
            shutil.rmtree(index_dir)
        index_dir.mkdir(parents=True, exist_ok=True)

        blobs = {
            SPANS_FILE: spans_to_bytes(self.spans),
            POSTINGS_FILE: self.index.to_bytes(),
            EMBEDDINGS_FILE: self.store.to_bytes(),
        }
        if self.forest is not None:
            blobs[FOREST_FILE] = self.forest.to_bytes()
        for name, data in blobs.items():
            (index_dir / name).write_bytes(data)
        manifest = {
            "format_version": FORMAT_VERSION,
            "N": self.index.N,
            "avgdl": self.index.avgdl,
            "k1": self.index.params.k1,
            "b": self.index.params.b,
            "span_count": len(self.spans),
            "term_count": len(self.index.postings),
            "embedder": self.config.embedder.to_dict(),
            "ann": asdict(self.config.ann),
            "defaults": {"n_candidates": self.config.n_candidates, "k_final": self.config.k_final},
            "files": {name: {"sha256": _sha256(data), "bytes": len(data)} for name, data in blobs.items()},
        }
        (index_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return index_dir

    @classmethod
    def load(cls, index_dir: str | os.PathLike, config: EngineConfig | None = None) -> "Engine":
        """Open an index directory, verifying format version and every checksum."""
        index_dir = Path(index_dir)
        try:
            manifest = json.loads((index_dir / MANIFEST).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise IndexFormatError(f"{index_dir}: no {MANIFEST} (not an index directory)") from None
        except json.JSONDecodeError as exc:
            raise IndexFormatError(f"{index_dir / MANIFEST}: {exc}") from None
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise IndexFormatError(f"{index_dir}: unsupported index format_version {version!r}")

        blobs = {}
        for name, meta in manifest["files"].items():
            data = (index_dir / name).read_bytes()
            if _sha256(data) != meta["sha256"]:
                raise IndexFormatError(f"{index_dir / name}: checksum mismatch")
            blobs[name] = data
        for name in (SPANS_FILE, POSTINGS_FILE, EMBEDDINGS_FILE):
            if name not in blobs:
                raise IndexFormatError(f"{index_dir}: manifest lists no {name}")

        stored = EngineConfig(
            index_dir=index_dir,
            embedder=EmbedderDescriptor.from_dict(manifest["embedder"]),
            bm25=BM25Params(manifest["k1"], manifest["b"]),
            ann=AnnParams(**manifest["ann"]),
            n_candidates=manifest["defaults"]["n_candidates"],
            k_final=manifest["defaults"]["k_final"],
        )
        if config is not None:
            # query-time defaults may be overridden; index-shaping settings come from disk
            stored = replace(stored, n_candidates=config.n_candidates, k_final=config.k_final)

        spans = spans_from_bytes(blobs[SPANS_FILE])
        index = LexicalIndex.from_bytes(blobs[POSTINGS_FILE], stored.bm25)
        store = EmbeddingStore.from_bytes(blobs[EMBEDDINGS_FILE])
        forest = AnnForest.from_bytes(blobs[FOREST_FILE]) if FOREST_FILE in blobs else None
        if index.N != manifest["N"] or len(spans) != manifest["span_count"]:
            raise IndexFormatError(f"{index_dir}: manifest counts disagree with index files")
        embedder = make_embedder(stored.embedder, store, {s.span_id: s.text for s in spans})
        return cls(spans, index, store, forest, embedder, stored)
