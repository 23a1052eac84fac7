"""Inverted index over spans with Lucene-style BM25 ranking."""

from __future__ import annotations

import bisect
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

_TOKEN = re.compile(r"[^\W_]+")


class LexicalIndexError(LookupError):
    """Duplicate or unknown span ids, or use of an index in the wrong phase."""


class EmptyQueryError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on every run of non-alphanumeric characters."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class BM25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self):
        if not self.k1 >= 0:
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if not 0 <= self.b <= 1:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")


class Posting(NamedTuple):
    span_id: int
    term_frequency: int


@dataclass(frozen=True)
class ScoredSpan:
    span_id: int
    score: float
    rank: int


def idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


def term_weight(tf: int, df: int, dl: int, n_docs: int, avgdl: float, params: BM25Params) -> float:
    """Contribution of one query term to one span's score."""
    k1, b = params.k1, params.b
    return idf(n_docs, df) * (tf * (k1 + 1)) / (tf + k1 * (1 - b + b * dl / avgdl))


class LexicalIndex:
    """Postings, document lengths and corpus statistics.

    Built with :meth:`add`, then frozen by :meth:`finalize`; only a finalized
    index can be searched, and a finalized index rejects further adds.
    """

    def __init__(self, params: BM25Params | None = None):
        self.params = params or BM25Params()
        self.postings: dict[str, list[Posting]] = {}
        self.doc_length: dict[int, int] = {}
        self._total_length = 0
        self._finalized = False

    @classmethod
    def build(cls, spans: Iterable, params: BM25Params | None = None) -> "LexicalIndex":
        index = cls(params)
        for span in spans:
            index.add(span.span_id, span.text)
        return index.finalize()

    @property
    def N(self) -> int:
        return len(self.doc_length)

    @property
    def avgdl(self) -> float:
        return self._total_length / self.N if self.N else 0.0

    @property
    def finalized(self) -> bool:
        return self._finalized

    def add(self, span_id: int, text: str) -> "LexicalIndex":
        if self._finalized:
            raise LexicalIndexError("index is finalized; no further adds")
        if span_id in self.doc_length:
            raise LexicalIndexError(f"span_id {span_id} already indexed")
        tokens = tokenize(text)
        self.doc_length[span_id] = len(tokens)
        self._total_length += len(tokens)
        for term, tf in Counter(tokens).items():
            self.postings.setdefault(term, []).append(Posting(span_id, tf))
        return self

    def finalize(self) -> "LexicalIndex":
        if not self._finalized:
            for plist in self.postings.values():
                plist.sort()
            self._finalized = True
        return self

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def tf(self, term: str, span_id: int) -> int:
        plist = self.postings.get(term)
        if not plist:
            return 0
        i = bisect.bisect_left(plist, (span_id,))
        if i < len(plist) and plist[i].span_id == span_id:
            return plist[i].term_frequency
        return 0

    def spans_with(self, term: str) -> set[int]:
        return {p.span_id for p in self.postings.get(term, ())}

    def score(self, query_terms: Iterable[str], span_id: int) -> float:
        if span_id not in self.doc_length:
            raise LexicalIndexError(f"span_id {span_id} is not indexed")
        dl = self.doc_length[span_id]
        total = 0.0
        for term in sorted(set(query_terms)):
            tf = self.tf(term, span_id)
            if tf:
                total += term_weight(tf, self.df(term), dl, self.N, self.avgdl, self.params)
        return total

    def search(
        self,
        query_text: str,
        n: int,
        required_terms: Iterable[str] = (),
        span_filter: Callable[[int], bool] | None = None,
    ) -> list[ScoredSpan]:
        """Top-``n`` spans by (score desc, span_id asc).

        Candidates match at least one query token and contain every required
        term; with no query tokens, the required terms alone select them.
        Scoring covers query tokens and required terms together.
        """
        if not self._finalized:
            raise LexicalIndexError("index must be finalized before searching")
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        query = set(tokenize(query_text))
        required = {t for r in required_terms for t in tokenize(r)}
        if not query and not required:
            raise EmptyQueryError("empty query")

        terms = sorted(query | required)
        scores: dict[int, float] = {}
        n_docs, avgdl, params = self.N, self.avgdl, self.params
        for term in terms:
            plist = self.postings.get(term)
            if not plist:
                continue
            df = len(plist)
            for span_id, tf in plist:
                dl = self.doc_length[span_id]
                scores[span_id] = scores.get(span_id, 0.0) + term_weight(tf, df, dl, n_docs, avgdl, params)

        if query:
            matched: set[int] = set()
            for term in query:
                matched |= self.spans_with(term)
        else:
            matched = set(scores)
        for term in required:
            matched &= self.spans_with(term)
        if span_filter is not None:
            matched = {s for s in matched if span_filter(s)}

        ranked = sorted(((scores[s], s) for s in matched if scores.get(s, 0.0) > 0.0), key=lambda x: (-x[0], x[1]))
        return [ScoredSpan(s, sc, i) for i, (sc, s) in enumerate(ranked[:n], start=1)]

    # ------------------------------------------------------------------
    # binary codec

    _MAGIC = b"PAPOST01"

    def to_bytes(self) -> bytes:
        self.finalize()
        out = [self._MAGIC, struct.pack("<QQ", len(self.doc_length), len(self.postings))]
        for span_id, length in sorted(self.doc_length.items()):
            out.append(struct.pack("<QI", span_id, length))
        for term in sorted(self.postings):
            raw = term.encode("utf-8")
            plist = self.postings[term]
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            out.append(struct.pack("<I", len(plist)))
            out.append(b"".join(struct.pack("<QI", p.span_id, p.term_frequency) for p in plist))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, params: BM25Params | None = None) -> "LexicalIndex":
        if data[:8] != cls._MAGIC:
            raise ValueError("not a postings file")
        try:
            n_docs, n_terms = struct.unpack_from("<QQ", data, 8)
            pos = 24
            index = cls(params)
            for span_id, length in struct.iter_unpack("<QI", data[pos : pos + 12 * n_docs]):
                index.doc_length[span_id] = length
                index._total_length += length
            pos += 12 * n_docs
            for _ in range(n_terms):
                (tlen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                term = data[pos : pos + tlen].decode("utf-8")
                pos += tlen
                (count,) = struct.unpack_from("<I", data, pos)
                pos += 4
                chunk = data[pos : pos + 12 * count]
                if len(chunk) != 12 * count:
                    raise ValueError("truncated postings")
                index.postings[term] = [Posting(*p) for p in struct.iter_unpack("<QI", chunk)]
                pos += 12 * count
        except struct.error as exc:
            raise ValueError(f"corrupt postings file: {exc}") from exc
        if pos != len(data):
            raise ValueError("trailing bytes in postings file")
        index._finalized = True
        return index
