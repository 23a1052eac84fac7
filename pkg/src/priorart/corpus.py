"""Patent TSV parsing, span segmentation and training-dataset emitters."""

from __future__ import annotations

import io
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Sequence

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = ("patent_id", "kind", "text")


class CorpusError(ValueError):
    pass


class SectionKind(str, Enum):
    TITLE = "title"
    ABSTRACT = "abstract"
    FIGURE = "figure"
    INDEPENDENT_CLAIM = "independent_claim"
    DEPENDENT_CLAIM = "dependent_claim"


# one per document
_SINGLETON_KINDS = {SectionKind.TITLE, SectionKind.ABSTRACT}
_SEGMENTED_KINDS = {
    SectionKind.ABSTRACT,
    SectionKind.INDEPENDENT_CLAIM,
    SectionKind.DEPENDENT_CLAIM,
}


class MetadataMapping(str, Enum):
    TITLE2ABSTRACT = "title2abstract"
    ABSTRACT2TITLE = "abstract2title"
    CLAIM2ABSTRACT = "claim2abstract"
    ABSTRACT2CLAIM = "abstract2claim"
    TITLE2FIGURE = "title2figure"
    FIGURE2TITLE = "figure2title"  # reserved, never emitted


# (source kind, target kind); "claim" means independent claims
_MAPPING_SIDES = {
    MetadataMapping.TITLE2ABSTRACT: (SectionKind.TITLE, SectionKind.ABSTRACT),
    MetadataMapping.ABSTRACT2TITLE: (SectionKind.ABSTRACT, SectionKind.TITLE),
    MetadataMapping.CLAIM2ABSTRACT: (SectionKind.INDEPENDENT_CLAIM, SectionKind.ABSTRACT),
    MetadataMapping.ABSTRACT2CLAIM: (SectionKind.ABSTRACT, SectionKind.INDEPENDENT_CLAIM),
    MetadataMapping.TITLE2FIGURE: (SectionKind.TITLE, SectionKind.FIGURE),
    MetadataMapping.FIGURE2TITLE: (SectionKind.FIGURE, SectionKind.TITLE),
}

SPAN_TAG = "<|span|>"
DEP_TAG = "<|dep|>"

_TAGS = {
    SectionKind.TITLE: ("<|start_of_title|>", "<|end_of_title|>"),
    SectionKind.ABSTRACT: ("<|start_of_abstract|>", "<|end_of_abstract|>"),
    SectionKind.FIGURE: ("<|start_of_figure|>", "<|end_of_figure|>"),
    SectionKind.INDEPENDENT_CLAIM: ("<|start_of_claim|>", "<|end_of_claim|>"),
    SectionKind.DEPENDENT_CLAIM: (f"{DEP_TAG} <|start_of_claim|>", "<|end_of_claim|>"),
}


def all_tag_strings() -> list[str]:
    """Every special tag string used by the GPT-2 emitter."""
    tags = {SPAN_TAG, DEP_TAG}
    for prefix, appendix in _TAGS.values():
        tags.update(prefix.split())
        tags.add(appendix)
    tags.update(f"<|{m.value}|>" for m in MetadataMapping)
    return sorted(tags)


@dataclass
class PatentDocument:
    patent_id: str
    sections: list[tuple[SectionKind, str]] = field(default_factory=list)

    def first(self, kind: SectionKind) -> str | None:
        for k, text in self.sections:
            if k is kind:
                return text
        return None


@dataclass(frozen=True)
class SpanRecord:
    span_id: int
    patent_id: str
    kind: SectionKind
    ordinal: int
    text: str

    def label(self) -> str:
        """Short human label, e.g. ``[ A-4 ]`` for the fifth abstract span."""
        letter = {
            SectionKind.TITLE: "T",
            SectionKind.ABSTRACT: "A",
            SectionKind.FIGURE: "F",
            SectionKind.INDEPENDENT_CLAIM: "C",
            SectionKind.DEPENDENT_CLAIM: "D",
        }[self.kind]
        return f"[ {letter}-{self.ordinal} ]"


@dataclass(frozen=True)
class RowError:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


@dataclass
class ParsedCorpus:
    documents: list[PatentDocument]
    errors: list[RowError]
    skipped_rows: int = 0


@dataclass
class EmissionStats:
    documents: int = 0
    spans: int = 0
    skipped_rows: int = 0

    def to_dict(self) -> dict:
        return {"documents": self.documents, "spans": self.spans, "skipped_rows": self.skipped_rows}


# --------------------------------------------------------------------------
# parsing


def parse_tsv(stream: IO[bytes] | IO[str], schema: Sequence[str] = DEFAULT_SCHEMA) -> ParsedCorpus:
    """Group TSV rows into documents.

    Row-level problems are collected as :class:`RowError` (with 1-based line
    numbers) and the offending row is dropped; rows with empty text are
    skipped and counted. A missing or incomplete header raises.
    """
    if isinstance(stream, io.TextIOBase):
        lines = iter(stream)
    else:
        lines = (raw.decode("utf-8") for raw in stream)

    try:
        header_line = next(lines)
    except StopIteration:
        raise CorpusError("empty TSV: missing header row") from None
    header = header_line.rstrip("\r\n").split("\t")
    missing = [c for c in schema if c not in header]
    if missing:
        raise CorpusError(f"TSV header lacks required columns: {', '.join(missing)}")
    col = {name: header.index(name) for name in DEFAULT_SCHEMA}

    docs: dict[str, PatentDocument] = {}
    errors: list[RowError] = []
    skipped = 0
    for lineno, line in enumerate(lines, start=2):
        line = line.rstrip("\r\n")
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            errors.append(RowError(lineno, f"expected {len(header)} columns, got {len(cells)}"))
            continue
        patent_id = cells[col["patent_id"]].strip()
        kind_raw = cells[col["kind"]].strip()
        text = cells[col["text"]]
        if not patent_id:
            errors.append(RowError(lineno, "empty patent_id"))
            continue
        try:
            kind = SectionKind(kind_raw)
        except ValueError:
            errors.append(RowError(lineno, f"unknown kind {kind_raw!r}"))
            continue
        if not text.strip():
            skipped += 1
            continue
        doc = docs.get(patent_id)
        if doc is None:
            doc = docs[patent_id] = PatentDocument(patent_id)
        if kind in _SINGLETON_KINDS and doc.first(kind) is not None:
            errors.append(RowError(lineno, f"duplicate {kind.value} for patent {patent_id}"))
            continue
        doc.sections.append((kind, text))

    return ParsedCorpus(list(docs.values()), errors, skipped)


# --------------------------------------------------------------------------
# segmentation

_CLAUSE_CUT = re.compile(r"(?<=[;:])\s+")
_SENTENCE_CUT = re.compile(r"(?<=[.?!])\s+(?=\S)")


def _clean(text: str) -> str:
    return " ".join(text.split())


def _sentences(text: str) -> list[str]:
    out: list[str] = []
    start = 0
    for m in _SENTENCE_CUT.finditer(text):
        if text[m.end()].isupper():
            out.append(text[start : m.start()])
            start = m.end()
    out.append(text[start:])
    return out


def split_spans(section_text: str, kind: SectionKind) -> list[str]:
    """Cut one section into spans.

    Titles and figure descriptions stay whole. Claims and abstracts are cut
    after every ``;`` or ``:`` that is followed by whitespace; an abstract
    yielding a single clause is cut at sentence ends instead (``.?!`` +
    whitespace + uppercase letter).
    Internal whitespace runs collapse to one space.
    """
    text = _clean(section_text)
    if not text:
        raise CorpusError("cannot split whitespace-only section text")
    kind = SectionKind(kind)
    if kind not in _SEGMENTED_KINDS:
        return [text]
    pieces = [p.strip() for p in _CLAUSE_CUT.split(text)]
    pieces = [p for p in pieces if p]
    if len(pieces) == 1 and kind is SectionKind.ABSTRACT:
        pieces = [p.strip() for p in _sentences(text) if p.strip()]
    return pieces


def ingest(documents: Iterable[PatentDocument]) -> list[SpanRecord]:
    spans: list[SpanRecord] = []
    for doc in documents:
        ordinals: Counter = Counter()
        for kind, text in doc.sections:
            kind = SectionKind(kind)
            for piece in split_spans(text, kind):
                spans.append(SpanRecord(len(spans), doc.patent_id, kind, ordinals[kind], piece))
                ordinals[kind] += 1
    if spans:
        counts = Counter(s.kind.value for s in spans)
        logger.info("ingested %d spans: %s", len(spans), dict(sorted(counts.items())))
    return spans


def count_by_kind(spans: Iterable[SpanRecord]) -> dict[str, int]:
    counts = Counter(s.kind.value for s in spans)
    return {k.value: counts.get(k.value, 0) for k in SectionKind}


# --------------------------------------------------------------------------
# emitters


def _write(sink, line: str) -> None:
    if callable(sink):
        sink(line)
    else:
        sink.write(line + "\n")


def _tagged(kind: SectionKind, text: str) -> tuple[str, int]:
    prefix, appendix = _TAGS[kind]
    spans = split_spans(text, kind)
    if kind in _SEGMENTED_KINDS:
        body = " ".join(f"{s} {SPAN_TAG}" for s in spans)
    else:
        body = " ".join(spans)
    return f"{prefix} {body} {appendix}", len(spans)


def validate_mappings(mappings: Iterable[MetadataMapping | str]) -> list[MetadataMapping]:
    resolved = []
    for m in mappings:
        try:
            m = MetadataMapping(m)
        except ValueError:
            raise CorpusError(f"unknown metadata mapping {m!r}") from None
        if m is MetadataMapping.FIGURE2TITLE:
            raise CorpusError(
                "figure2title is reserved for few-shot testing and is never emitted into training data"
            )
        resolved.append(m)
    return resolved


def emit_gpt2_dataset(
    documents: Iterable[PatentDocument],
    mappings: Iterable[MetadataMapping | str],
    sink,
    skipped_rows: int = 0,
) -> EmissionStats:
    """Write tagged GPT-2 training lines.

    ``sink`` is a text stream or a callable taking one line (no newline).
    Per document: one line per section, then one line per requested mapping
    pair. Claim mappings pair with each independent claim; title2figure with
    each figure.
    """
    mappings = validate_mappings(mappings)
    stats = EmissionStats(skipped_rows=skipped_rows)
    for doc in documents:
        stats.documents += 1
        tagged: list[tuple[SectionKind, str]] = []
        for kind, text in doc.sections:
            kind = SectionKind(kind)
            line, n = _tagged(kind, text)
            stats.spans += n
            tagged.append((kind, line))
            _write(sink, line)
        for m in mappings:
            src, dst = _MAPPING_SIDES[m]
            lefts = [t for k, t in tagged if k is src]
            rights = [t for k, t in tagged if k is dst]
            for left in lefts:
                for right in rights:
                    _write(sink, f"{left} <|{m.value}|> {right}")
    return stats


def emit_bert_dataset(
    documents: Iterable[PatentDocument], sink, skipped_rows: int = 0
) -> EmissionStats:
    """One untagged span per line; a single empty line between documents."""
    stats = EmissionStats(skipped_rows=skipped_rows)
    for doc in documents:
        spans = [s for kind, text in doc.sections for s in split_spans(text, SectionKind(kind))]
        if not spans:
            continue
        if stats.documents:
            _write(sink, "")
        stats.documents += 1
        stats.spans += len(spans)
        for s in spans:
            _write(sink, s)
    return stats
