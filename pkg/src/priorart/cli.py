"""``priorart`` command line: ingest, search, emit, eval, serve.

Exit codes: 0 success, 1 runtime error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import (
    CorpusError,
    MetadataMapping,
    count_by_kind,
    emit_bert_dataset,
    emit_gpt2_dataset,
    ingest,
    parse_tsv,
    validate_mappings,
)
from .embedding import EmbeddingError, load_embeddings
from .engine import EngineConfig, Engine, IndexFormatError
from .lexical import EmptyQueryError
from .pipeline import SearchError, SearchMode

log = logging.getLogger("priorart")


class UsageError(Exception):
    """Bad invocation or unreadable input; exits with status 2."""


def _config(args, **overrides) -> EngineConfig:
    flags = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "index_dir", None):
        flags["index_dir"] = args.index_dir
    try:
        return EngineConfig.load(args.config, flags)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from None
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad config: {exc}") from None


def _require_index_dir(cfg: EngineConfig) -> Path:
    if cfg.index_dir is None:
        raise UsageError("no index directory: pass --index-dir or set PRIORART_INDEX_DIR")
    return cfg.index_dir


def _open_engine(cfg: EngineConfig) -> Engine:
    index_dir = _require_index_dir(cfg)
    if not index_dir.is_dir():
        raise UsageError(f"index directory not found: {index_dir}")
    try:
        return Engine.load(index_dir, cfg)
    except IndexFormatError as exc:
        raise UsageError(str(exc)) from None


def _parse_corpus(path: str, lenient: bool):
    tsv = Path(path)
    if not tsv.is_file():
        raise UsageError(f"input file not found: {tsv}")
    with open(tsv, "rb") as fh:
        try:
            parsed = parse_tsv(fh)
        except (CorpusError, UnicodeDecodeError) as exc:
            raise UsageError(f"{tsv}: {exc}") from None
    for err in parsed.errors:
        print(f"{tsv}:{err.line}: {err.message}", file=sys.stderr)
    if parsed.errors and not lenient:
        raise UsageError(f"{tsv}: {len(parsed.errors)} malformed row(s); rerun with --lenient to skip them")
    return parsed


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=False))


# --------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    cfg = _config(
        args,
        embedder_dim=args.dim,
        vectors_path=args.vectors,
        k1=args.k1,
        b=args.b,
        n_trees=args.n_trees,
        leaf_capacity=args.leaf_capacity,
        seed=args.seed,
    )
    index_dir = _require_index_dir(cfg)
    if index_dir.exists() and any(index_dir.iterdir()) and not args.overwrite:
        raise UsageError(f"{index_dir} already exists and is not empty; pass --overwrite to replace it")
    parsed = _parse_corpus(args.tsv, args.lenient)
    try:
        spans = ingest(parsed.documents)
    except CorpusError as exc:
        raise UsageError(f"{args.tsv}: {exc}") from None

    store = None
    if cfg.embedder.kind == "file":
        vec_path = Path(cfg.embedder.parameters.get("path", ""))
        if not vec_path.is_file():
            raise UsageError(f"vector file not found: {vec_path}")
        try:
            with open(vec_path, "rb") as fh:
                store = load_embeddings(fh)
        except EmbeddingError as exc:
            raise UsageError(f"{vec_path}: {exc}") from None

    engine = Engine.build(spans, cfg, store)
    engine.save(index_dir, overwrite=args.overwrite)
    _print_json(
        {
            "documents": len(parsed.documents),
            "spans": len(spans),
            "skipped_rows": parsed.skipped_rows,
            "errors": len(parsed.errors),
            "spans_by_kind": count_by_kind(spans),
            "index_dir": str(index_dir),
        }
    )
    return 0


def _render_table(resp) -> str:
    lines = [f"{resp.mode}: {len(resp.results)} result(s) in {resp.elapsed_ms:.1f} ms"]
    for pos, r in enumerate(resp.results, start=1):
        label = {"title": "T", "abstract": "A", "figure": "F", "independent_claim": "C", "dependent_claim": "D"}[r.kind]
        lines.append(f"[{pos}] patent {r.patent_id} [ {label}-{r.ordinal} ] span {r.span_id}")
        lines.append(f"    text: {r.text}")
        ranks = []
        if r.bm25_rank is not None:
            ranks.append(f"ranked by BM25: {r.bm25_rank} ({r.bm25_score:.4f})")
        if r.embed_rank is not None:
            ranks.append(f"re-ranked by embedding: {r.embed_rank} ({r.cosine_score:.4f})")
        lines.append("    " + " / ".join(ranks))
    return "\n".join(lines)


def _search_remote(args) -> int:
    import httpx

    params = [("q", args.query), ("mode", args.mode)]
    params += [(name, str(v)) for name, v in (("n", args.n), ("k", args.k)) if v is not None]
    params += [("require", t) for t in args.require] + [("kind", k) for k in args.kind]
    try:
        resp = httpx.get(args.server.rstrip("/") + "/search", params=params, timeout=60.0)
    except httpx.HTTPError as exc:
        print(f"error: cannot reach {args.server}: {exc}", file=sys.stderr)
        return 1
    if resp.status_code == 400:
        raise UsageError(resp.json().get("error", resp.text))
    if resp.status_code != 200:
        print(f"error: server answered {resp.status_code}: {resp.text}", file=sys.stderr)
        return 1
    if args.json:
        print(resp.text)
    else:
        from .schemas import SearchResponse

        print(_render_table(SearchResponse.model_validate_json(resp.content)))
    return 0


def cmd_search(args) -> int:
    if args.server:
        return _search_remote(args)
    from .schemas import run_search

    cfg = _config(args)
    engine = _open_engine(cfg)
    try:
        query = engine.query(args.query, args.mode, args.n, args.k, args.require, args.kind)
        resp = run_search(engine, query)
    except (SearchError, EmptyQueryError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    print(resp.to_json() if args.json else _render_table(resp))
    return 0


def cmd_emit(args) -> int:
    mappings = [m.strip() for group in args.mapping for m in group.split(",") if m.strip()]
    try:
        mappings = validate_mappings(mappings)
    except CorpusError as exc:
        raise UsageError(str(exc)) from None
    parsed = _parse_corpus(args.tsv, args.lenient)
    out = Path(args.out)
    try:
        with open(out, "w", encoding="utf-8", newline="\n") as sink:
            if args.format == "gpt2":
                stats = emit_gpt2_dataset(parsed.documents, mappings, sink, parsed.skipped_rows)
            else:
                stats = emit_bert_dataset(parsed.documents, sink, parsed.skipped_rows)
    except CorpusError as exc:
        out.unlink(missing_ok=True)
        raise UsageError(f"{args.tsv}: {exc}") from None
    _print_json(stats.to_dict())
    return 0


def _read_eval_set(path: str):
    src = Path(path)
    if not src.is_file():
        raise UsageError(f"query file not found: {src}")
    queries, truth = [], {}
    with open(src, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                q, rel = row["query"], [int(x) for x in row["relevant"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise UsageError(f"{src}:{lineno}: expected {{'query': str, 'relevant': [span_id, ...]}} ({exc})") from None
            if q not in truth:
                queries.append(q)
                truth[q] = []
            truth[q].extend(rel)
    return queries, truth


def cmd_eval(args) -> int:
    cfg = _config(args)
    engine = _open_engine(cfg)
    queries, truth = _read_eval_set(args.queries)
    modes = args.mode or None
    try:
        table = engine.evaluate(
            queries,
            truth,
            modes=modes,
            ks=sorted(set(args.at)) if args.at else (1, 10),
            n_candidates=cfg.n_candidates if args.n is None else args.n,
            k_final=cfg.k_final,
        )
    except SearchError as exc:
        raise UsageError(str(exc)) from None
    _print_json(table)
    return 0


def cmd_serve(args) -> int:
    from .api import serve

    cfg = _config(args)
    engine = _open_engine(cfg)
    log.info("loaded %d spans from %s", len(engine.spans), cfg.index_dir)
    try:
        serve(engine, args.host, args.port)
    except (OSError, SystemExit) as exc:
        print(f"error: cannot serve on {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priorart", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, index=True):
        p.add_argument("--config", help="flat JSON config file")
        if index:
            p.add_argument("--index-dir", help="index directory (default: $PRIORART_INDEX_DIR)")

    p = sub.add_parser("ingest", help="parse a TSV corpus and build an index directory")
    common(p)
    p.add_argument("tsv")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")
    p.add_argument("--vectors", help="external vector file (#dim header, span_id<TAB>v1,...)")
    p.add_argument("--dim", type=int, help="hash embedder dimension")
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--n-trees", type=int)
    p.add_argument("--leaf-capacity", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("search", help="query an index")
    common(p)
    p.add_argument("query")
    p.add_argument("--mode", choices=[m.value for m in SearchMode], default=SearchMode.RERANK.value)
    p.add_argument("--n", type=int, help="BM25 candidates (default 100)")
    p.add_argument("--k", type=int, help="final results (default 10)")
    p.add_argument("--require", action="append", default=[], help="required term (repeatable)")
    p.add_argument("--kind", action="append", default=[], help="restrict to a section kind (repeatable)")
    p.add_argument("--json", action="store_true")
    p.add_argument("--server", help="query a running service at this base URL instead of a local index")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("emit", help="write GPT-2 or BERT training text from a TSV corpus")
    p.add_argument("tsv")
    p.add_argument("--format", choices=["gpt2", "bert"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--mapping",
        action="append",
        default=[],
        help=f"metadata mapping, repeatable or comma separated ({', '.join(m.value for m in MetadataMapping)})",
    )
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("eval", help="recall@k and MRR per search mode")
    common(p)
    p.add_argument("queries", help='JSON lines: {"query": ..., "relevant": [span_id, ...]}')
    p.add_argument("--mode", action="append", choices=[m.value for m in SearchMode])
    p.add_argument("--at", action="append", type=int, help="recall cutoff (repeatable; default 1 and 10)")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the read-only HTTP service")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
