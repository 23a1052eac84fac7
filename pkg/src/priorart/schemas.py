"""Pydantic wire models shared by the HTTP service and the CLI."""

from __future__ import annotations

import time
from typing import List, Optional

from pydantic import BaseModel, ConfigDict

from .pipeline import Query, RerankResult


class ResultModel(BaseModel):
    span_id: int
    patent_id: str
    kind: str
    ordinal: int
    text: str
    bm25_rank: Optional[int] = None
    bm25_score: Optional[float] = None
    embed_rank: Optional[int] = None
    cosine_score: Optional[float] = None

    @classmethod
    def from_result(cls, r: RerankResult) -> "ResultModel":
        return cls(**r.to_dict())


class QueryEcho(BaseModel):
    q: str
    n: int
    k: int
    require: List[str] = []
    kind: List[str] = []


class SearchResponse(BaseModel):
    model_config = ConfigDict(use_enum_values=True)

    query: QueryEcho
    mode: str
    elapsed_ms: float
    results: List[ResultModel]

    def to_json(self) -> str:
        return self.model_dump_json(exclude_none=True)


class HealthResponse(BaseModel):
    status: str
    spans: int


class ErrorResponse(BaseModel):
    error: str


def run_search(engine, query: Query) -> SearchResponse:
    """Execute ``query`` on ``engine`` and wrap it in the wire model."""
    t0 = time.perf_counter()
    results = engine.search(query)
    elapsed = (time.perf_counter() - t0) * 1000.0
    return SearchResponse(
        query=QueryEcho(
            q=query.text,
            n=query.n_candidates,
            k=query.k_final,
            require=list(query.required_terms),
            kind=[k.value for k in query.kinds],
        ),
        mode=query.mode.value,
        elapsed_ms=round(elapsed, 3),
        results=[ResultModel.from_result(r) for r in results],
    )
