"""Two-stage search: BM25 candidates reranked by embedding cosine."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ann import AnnForest, AnnQueryBudget
from .corpus import SectionKind, SpanRecord
from .embedding import Embedder, EmbeddingStore, cosine
from .lexical import EmptyQueryError, LexicalIndex, tokenize

DEFAULT_N_CANDIDATES = 100
DEFAULT_K_FINAL = 10
# widening applied to the ANN budget when required terms post-filter its output
REQUIRED_TERM_WIDENING = 4


class SearchError(ValueError):
    pass


class SearchMode(str, Enum):
    BM25_ONLY = "bm25_only"
    EMBEDDING_ONLY = "embedding_only"
    RERANK = "rerank"


@dataclass(frozen=True)
class Query:
    text: str
    mode: SearchMode = SearchMode.RERANK
    n_candidates: int = DEFAULT_N_CANDIDATES
    k_final: int = DEFAULT_K_FINAL
    required_terms: tuple[str, ...] = ()
    kinds: tuple[SectionKind, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "mode", SearchMode(self.mode))
        object.__setattr__(self, "required_terms", tuple(self.required_terms))
        object.__setattr__(self, "kinds", tuple(SectionKind(k) for k in self.kinds))
        if self.n_candidates < 1 or self.k_final < 1:
            raise SearchError("n_candidates and k_final must be >= 1")
        if self.mode is SearchMode.RERANK and self.k_final > self.n_candidates:
            raise SearchError(f"k_final ({self.k_final}) exceeds n_candidates ({self.n_candidates})")


@dataclass
class RerankResult:
    span_id: int
    patent_id: str
    kind: SectionKind
    ordinal: int
    text: str
    bm25_rank: int | None = None
    bm25_score: float | None = None
    embed_rank: int | None = None
    cosine_score: float | None = None

    def to_dict(self) -> dict:
        out = {
            "span_id": self.span_id,
            "patent_id": self.patent_id,
            "kind": self.kind.value,
            "ordinal": self.ordinal,
            "text": self.text,
        }
        for name in ("bm25_rank", "bm25_score", "embed_rank", "cosine_score"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out


@dataclass
class SearchComponents:
    """Everything one search needs; treated as immutable once assembled."""

    spans: Sequence[SpanRecord]
    index: LexicalIndex | None
    store: EmbeddingStore
    embedder: Embedder
    forest: AnnForest | None = None

    def __post_init__(self):
        dense = all(s.span_id == i for i, s in enumerate(self.spans))
        self._by_id = None if dense else {s.span_id: s for s in self.spans}

    def span(self, span_id: int) -> SpanRecord | None:
        if self._by_id is not None:
            return self._by_id.get(span_id)
        if 0 <= span_id < len(self.spans):
            return self.spans[span_id]
        return None


def _decorate(span: SpanRecord, **ranks) -> RerankResult:
    return RerankResult(span.span_id, span.patent_id, span.kind, span.ordinal, span.text, **ranks)


def _kind_filter(query: Query, comps: SearchComponents):
    if not query.kinds:
        return None
    allowed = set(query.kinds)
    return lambda sid: (s := comps.span(sid)) is not None and s.kind in allowed


def _query_vector(query: Query, embedder: Embedder) -> np.ndarray:
    vec = np.asarray(embedder.embed(query.text), dtype=np.float64)
    if not np.any(vec):
        raise SearchError("query not embeddable")
    return vec


def search(query: Query, comps: SearchComponents) -> list[RerankResult]:
    mode = query.mode
    if mode is SearchMode.EMBEDDING_ONLY:
        if comps.forest is None:
            raise SearchError("embedding_only mode needs an ANN forest")
        return _search_embedding(query, comps)
    if comps.index is None:
        raise SearchError(f"{mode.value} mode needs a lexical index")

    n = query.k_final if mode is SearchMode.BM25_ONLY else query.n_candidates
    hits = comps.index.search(query.text, n, query.required_terms, span_filter=_kind_filter(query, comps))
    if mode is SearchMode.BM25_ONLY:
        return [_decorate(comps.span(h.span_id), bm25_rank=h.rank, bm25_score=h.score) for h in hits]
    if not hits:
        return []

    qvec = _query_vector(query, comps.embedder)
    scored = []
    for h in hits:
        vec = comps.store.get(h.span_id)
        if vec is None:
            vec = comps.embedder.embed(comps.span(h.span_id).text)
        scored.append((cosine(qvec, vec), h))
    scored.sort(key=lambda x: (-x[0], x[1].span_id))
    return [
        _decorate(
            comps.span(h.span_id),
            bm25_rank=h.rank,
            bm25_score=h.score,
            embed_rank=rank,
            cosine_score=cos,
        )
        for rank, (cos, h) in enumerate(scored[: query.k_final], start=1)
    ]


def _search_embedding(query: Query, comps: SearchComponents) -> list[RerankResult]:
    qvec = _query_vector(query, comps.embedder)
    forest = comps.forest
    required = {t for r in query.required_terms for t in tokenize(r)}
    allowed_kinds = set(query.kinds)
    filtered = bool(required or allowed_kinds)

    search_k = forest.n_trees * query.k_final * 4
    if filtered:
        search_k *= REQUIRED_TERM_WIDENING
        budget = AnnQueryBudget(search_k, search_k)
    else:
        budget = AnnQueryBudget(query.k_final, search_k)

    out: list[RerankResult] = []
    for hit in forest.query(qvec, budget):
        span = comps.span(hit.span_id)
        if span is None:
            continue
        if allowed_kinds and span.kind not in allowed_kinds:
            continue
        if required and not required <= set(tokenize(span.text)):
            continue
        out.append(_decorate(span, embed_rank=len(out) + 1, cosine_score=hit.score))
        if len(out) == query.k_final:
            break
    return out


# --------------------------------------------------------------------------
# evaluation


def _metrics(ranked: list[list[int]], relevant: list[set[int]], ks: Sequence[int]) -> dict:
    n = len(ranked)
    row: dict = {"queries": n}
    for k in ks:
        row[f"recall@{k}"] = sum(len(set(r[:k]) & rel) / len(rel) for r, rel in zip(ranked, relevant)) / n
    rr = []
    for r, rel in zip(ranked, relevant):
        rr.append(next((1.0 / i for i, sid in enumerate(r, start=1) if sid in rel), 0.0))
    row["mrr"] = sum(rr) / n
    return row


def evaluate_modes(
    queries: Sequence[str],
    ground_truth: Mapping[str, Iterable[int]],
    comps: SearchComponents,
    modes: Sequence[SearchMode | str] | None = None,
    ks: Sequence[int] = (1, 10),
    n_candidates: int = DEFAULT_N_CANDIDATES,
    k_final: int = DEFAULT_K_FINAL,
) -> dict[str, dict]:
    """Recall@k and MRR per search mode over a labelled query set.

    Queries with no relevant spans are ignored. Modes whose components are
    missing (no forest for embedding_only) are skipped when ``modes`` is None.
    """
    if not queries:
        return {}
    relevant: list[set[int]] = []
    kept: list[str] = []
    for q in queries:
        rel = {int(s) for s in ground_truth.get(q, ())}
        for sid in rel:
            if comps.span(sid) is None:
                raise SearchError(f"ground truth references unknown span id {sid}")
        if rel:
            kept.append(q)
            relevant.append(rel)
    if not kept:
        return {}

    if modes is None:
        modes = [SearchMode.BM25_ONLY, SearchMode.RERANK]
        if comps.forest is not None:
            modes.insert(1, SearchMode.EMBEDDING_ONLY)
    depth = max(max(ks), k_final)
    table = {}
    for mode in map(SearchMode, modes):
        ranked = []
        for q in kept:
            try:
                res = search(Query(q, mode, max(n_candidates, depth), depth), comps)
            except (SearchError, EmptyQueryError):
                res = []
            ranked.append([r.span_id for r in res])
        table[mode.value] = _metrics(ranked, relevant, ks)
    return table
