import io
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorart.corpus import (
    CorpusError,
    MetadataMapping,
    PatentDocument,
    SectionKind,
    all_tag_strings,
    emit_bert_dataset,
    emit_gpt2_dataset,
    ingest,
    parse_tsv,
    split_spans,
)

HEADER = "patent_id\tkind\ttext\n"


def tsv(*rows, header=HEADER, eol="\n"):
    return io.BytesIO((header + "".join("\t".join(r) + eol for r in rows)).encode("utf-8"))


# ---------------------------------------------------------------- parse_tsv


def test_parse_single_row():
    parsed = parse_tsv(tsv(("p1", "title", "Wireless apparatus")))
    assert len(parsed.documents) == 1
    doc = parsed.documents[0]
    assert doc.patent_id == "p1"
    assert doc.sections == [(SectionKind.TITLE, "Wireless apparatus")]
    assert parsed.errors == []


def test_parse_header_only():
    parsed = parse_tsv(tsv())
    assert parsed.documents == []
    assert parsed.errors == []
    assert parsed.skipped_rows == 0


def test_parse_groups_interleaved_rows():
    parsed = parse_tsv(
        tsv(
            ("p1", "title", "T1"),
            ("p2", "title", "T2"),
            ("p1", "abstract", "A1."),
            ("p1", "independent_claim", "C1."),
        )
    )
    counts = {d.patent_id: len(d.sections) for d in parsed.documents}
    assert counts == {"p1": 3, "p2": 1}
    assert [k for k, _ in parsed.documents[0].sections] == [
        SectionKind.TITLE,
        SectionKind.ABSTRACT,
        SectionKind.INDEPENDENT_CLAIM,
    ]


def test_parse_crlf_and_column_order():
    stream = io.BytesIO(b"text\tpatent_id\tkind\r\nHello\tp9\ttitle\r\n")
    parsed = parse_tsv(stream)
    assert parsed.documents[0].sections == [(SectionKind.TITLE, "Hello")]


def test_parse_row_errors_are_recoverable():
    parsed = parse_tsv(
        tsv(
            ("p1", "title", "T"),
            ("p1", "title", "again"),
            ("p1", "claims", "bad kind"),
            ("p2", "title"),
            ("p3", "abstract", "   "),
            ("p3", "abstract", "ok."),
        )
    )
    assert [e.line for e in parsed.errors] == [3, 4, 5]
    assert "duplicate" in parsed.errors[0].message
    assert "unknown kind" in parsed.errors[1].message
    assert "columns" in parsed.errors[2].message
    assert parsed.skipped_rows == 1
    assert [d.patent_id for d in parsed.documents] == ["p1", "p3"]


def test_parse_missing_columns():
    with pytest.raises(CorpusError):
        parse_tsv(io.BytesIO(b"id\tkind\ttext\n"))


# ---------------------------------------------------------------- split_spans


def test_split_title_is_single_span():
    assert split_spans("Wireless apparatus", SectionKind.TITLE) == ["Wireless apparatus"]


def test_split_claim_at_semicolons_and_colons():
    assert split_spans("A device comprising: a sensor; and a transmitter.", SectionKind.INDEPENDENT_CLAIM) == [
        "A device comprising:",
        "a sensor;",
        "and a transmitter.",
    ]


def test_split_abstract_falls_back_to_sentences():
    assert split_spans("An apparatus is provided. The apparatus detects networks.", SectionKind.ABSTRACT) == [
        "An apparatus is provided.",
        "The apparatus detects networks.",
    ]


def test_split_sentence_needs_uppercase_follower():
    text = "Voltage is 3.3 volts. it stays. Then U.S. Patent applies."
    assert split_spans(text, SectionKind.ABSTRACT) == ["Voltage is 3.3 volts. it stays.", "Then U.S.", "Patent applies."]


def test_split_claims_do_not_sentence_split():
    text = "A method. The method works."
    assert split_spans(text, SectionKind.INDEPENDENT_CLAIM) == [text]


def test_split_figure_ignores_punctuation():
    assert split_spans("FIG. 1: a view; another", SectionKind.FIGURE) == ["FIG. 1: a view; another"]


def test_split_whitespace_only_rejected():
    with pytest.raises(CorpusError):
        split_spans(" \t ", SectionKind.ABSTRACT)


def _squash(s):
    return " ".join(s.split())


@given(
    st.text(alphabet=st.sampled_from(list("abcXYZ .;:!?\t\n,")), min_size=1, max_size=80).filter(lambda s: s.strip()),
    st.sampled_from(list(SectionKind)),
)
def test_split_round_trip(text, kind):
    spans = split_spans(text, kind)
    assert spans and all(s and s == s.strip() and "\n" not in s for s in spans)
    assert _squash(" ".join(spans)) == _squash(text)


# ---------------------------------------------------------------- ingest


def test_ingest_ordinals():
    doc = PatentDocument("p1", [(SectionKind.TITLE, "T"), (SectionKind.ABSTRACT, "One thing. Two things.")])
    spans = ingest([doc])
    assert [(s.span_id, s.kind, s.ordinal) for s in spans] == [
        (0, SectionKind.TITLE, 0),
        (1, SectionKind.ABSTRACT, 0),
        (2, SectionKind.ABSTRACT, 1),
    ]


def test_ingest_empty():
    assert ingest([]) == []


def test_ingest_keeps_duplicates():
    doc = PatentDocument("p1", [(SectionKind.ABSTRACT, "Same text. Same text.")])
    spans = ingest([doc])
    assert [s.text for s in spans] == ["Same text.", "Same text."]
    assert spans[0].span_id != spans[1].span_id


def test_ingest_ordinal_counts_per_kind_across_sections():
    doc = PatentDocument(
        "p1",
        [
            (SectionKind.INDEPENDENT_CLAIM, "a; b"),
            (SectionKind.DEPENDENT_CLAIM, "c"),
            (SectionKind.INDEPENDENT_CLAIM, "d"),
        ],
    )
    keys = [(s.kind.value, s.ordinal) for s in ingest([doc])]
    assert keys == [("independent_claim", 0), ("independent_claim", 1), ("dependent_claim", 0), ("independent_claim", 2)]
    assert len(set(keys)) == len(keys)


def test_ingest_deterministic(golden_dir):
    data = (golden_dir / "five_docs.tsv").read_bytes()
    a = ingest(parse_tsv(io.BytesIO(data)).documents)
    b = ingest(parse_tsv(io.BytesIO(data)).documents)
    assert a == b
    assert [s.span_id for s in a] == list(range(len(a)))


# ---------------------------------------------------------------- emitters


def test_gpt2_title_line():
    lines = []
    emit_gpt2_dataset([PatentDocument("p", [(SectionKind.TITLE, "X")])], [], lines.append)
    assert lines == ["<|start_of_title|> X <|end_of_title|>"]


def test_gpt2_title2abstract_mapping():
    lines = []
    doc = PatentDocument("p", [(SectionKind.TITLE, "X"), (SectionKind.ABSTRACT, "Y.")])
    emit_gpt2_dataset([doc], [MetadataMapping.TITLE2ABSTRACT], lines.append)
    assert lines[-1] == (
        "<|start_of_title|> X <|end_of_title|> <|title2abstract|> "
        "<|start_of_abstract|> Y. <|span|> <|end_of_abstract|>"
    )


def test_gpt2_dependent_claim_prefix():
    lines = []
    emit_gpt2_dataset([PatentDocument("p", [(SectionKind.DEPENDENT_CLAIM, "The x of claim 1.")])], [], lines.append)
    assert lines == ["<|dep|> <|start_of_claim|> The x of claim 1. <|span|> <|end_of_claim|>"]


def test_gpt2_rejects_figure2title_before_output():
    lines = []
    with pytest.raises(CorpusError, match="figure2title"):
        emit_gpt2_dataset(
            [PatentDocument("p", [(SectionKind.TITLE, "X")])],
            ["title2abstract", "figure2title"],
            lines.append,
        )
    assert lines == []


def test_gpt2_lines_have_balanced_tags(golden_dir):
    parsed = parse_tsv(open(golden_dir / "five_docs.tsv", "rb"))
    lines = []
    emit_gpt2_dataset(parsed.documents, [m for m in MetadataMapping if m is not MetadataMapping.FIGURE2TITLE], lines.append)
    for line in lines:
        for name in re.findall(r"<\|start_of_(\w+)\|>", line):
            assert line.count(f"<|start_of_{name}|>") == line.count(f"<|end_of_{name}|>")


def test_bert_layout():
    docs = [
        PatentDocument("a", [(SectionKind.ABSTRACT, "One. Two.")]),
        PatentDocument("b", [(SectionKind.TITLE, "Three")]),
    ]
    lines = []
    stats = emit_bert_dataset(docs, lines.append)
    assert lines == ["One.", "Two.", "", "Three"]
    assert stats.to_dict() == {"documents": 2, "spans": 3, "skipped_rows": 0}


def test_bert_single_document_has_no_blank():
    lines = []
    emit_bert_dataset([PatentDocument("a", [(SectionKind.TITLE, "Only")])], lines.append)
    assert "" not in lines


def test_bert_keeps_literal_tags():
    lines = []
    emit_bert_dataset([PatentDocument("a", [(SectionKind.TITLE, "keep <|span|> here")])], lines.append)
    assert lines == ["keep <|span|> here"]


def test_bert_adds_no_tags(golden_dir):
    parsed = parse_tsv(open(golden_dir / "five_docs.tsv", "rb"))
    buf = io.StringIO()
    emit_bert_dataset(parsed.documents, buf)
    out = buf.getvalue()
    for tag in all_tag_strings():
        assert tag not in out


def test_split_delimiter_without_space_is_not_a_cut():
    assert split_spans("a ratio of 3:4; and more", SectionKind.INDEPENDENT_CLAIM) == ["a ratio of 3:4;", "and more"]
