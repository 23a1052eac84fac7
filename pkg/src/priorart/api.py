"""Read-only HTTP query service."""

from __future__ import annotations

import logging
from typing import List, Optional

from fastapi import FastAPI, Query as Param
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from starlette.exceptions import HTTPException as StarletteHTTPException

from .corpus import CorpusError
from .engine import Engine
from .lexical import EmptyQueryError
from .pipeline import SearchError
from .schemas import ErrorResponse, HealthResponse, SearchResponse, run_search

logger = logging.getLogger(__name__)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(engine: Engine) -> FastAPI:
    """Bind an already-loaded engine; nothing is read from disk per request."""
    app = FastAPI(title="priorart", description="Two-stage prior-art span search")
    app.state.engine = engine

    @app.exception_handler(RequestValidationError)
    async def _bad_params(request, exc: RequestValidationError):
        parts = []
        for err in exc.errors():
            loc = ".".join(str(x) for x in err.get("loc", ()) if x != "query")
            parts.append(f"{loc}: {err.get('msg')}")
        return _error(400, "; ".join(parts) or "invalid parameters")

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(request, exc: StarletteHTTPException):
        return _error(exc.status_code, str(exc.detail))

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", spans=len(engine.spans))

    @app.get(
        "/search",
        response_model=SearchResponse,
        response_model_exclude_none=True,
        responses={400: {"model": ErrorResponse}},
    )
    def search(
        q: Optional[str] = None,
        mode: str = "rerank",
        n: Optional[int] = None,
        k: Optional[int] = None,
        require: List[str] = Param(default=[]),
        kind: List[str] = Param(default=[]),
    ):
        if q is None or not q.strip():
            return _error(400, "missing required parameter q")
        try:
            query = engine.query(q, mode, n, k, require, kind)
            body = run_search(engine, query)
        except (SearchError, EmptyQueryError, CorpusError, ValueError) as exc:
            return _error(400, str(exc))
        return Response(content=body.to_json(), media_type="application/json")

    return app


def serve(engine: Engine, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(create_app(engine), host=host, port=port, log_level="info", timeout_graceful_shutdown=10)
