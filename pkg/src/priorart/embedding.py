"""Text embedders, cosine similarity and the span embedding store."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import IO, Iterable, Mapping, Protocol

import numpy as np

from .lexical import tokenize

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

DEFAULT_DIM = 256


class EmbeddingError(ValueError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def _token_slot(token: str, dim: int) -> tuple[int, float]:
    bucket = fnv1a_64(token.encode("utf-8")) % dim
    sign = -1.0 if fnv1a_64(("s:" + token).encode("utf-8")) >> 63 else 1.0
    return bucket, sign


def embed_hash(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed feature-hashing embedding, L2-normalized.

    Text with no tokens maps to the zero vector.
    """
    if dim < 2:
        raise EmbeddingError(f"dim must be >= 2, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        bucket, sign = _token_slot(token, dim)
        vec[bucket] += sign
    norm = math.sqrt(float(np.dot(vec, vec)))
    if norm > 0:
        vec /= norm
    return vec


def cosine(a, b) -> float:
    """Cosine similarity with left-to-right summation; 0.0 if either is zero."""
    a = a.tolist() if isinstance(a, np.ndarray) else [float(x) for x in a]
    b = b.tolist() if isinstance(b, np.ndarray) else [float(x) for x in b]
    if len(a) != len(b):
        raise EmbeddingError(f"dimension mismatch: {len(a)} vs {len(b)}")
    dot = na = nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    if na == 0.0 or nb == 0.0:
        # squares of tiny components can underflow; rescale and retry once
        sa, sb = max(map(abs, a), default=0.0), max(map(abs, b), default=0.0)
        if sa == 0.0 or sb == 0.0 or (sa >= 1e-150 and sb >= 1e-150):
            return 0.0
        return cosine([x / sa for x in a], [y / sb for y in b])
    return dot / (math.sqrt(na) * math.sqrt(nb))


def cosine_rows(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Cosine of every row against ``q``; each row reduced independently of the others."""
    qn = math.sqrt(float((q * q).sum()))
    if qn == 0.0:
        return np.zeros(len(matrix))
    dots = (matrix * q).sum(axis=1)
    norms = np.sqrt((matrix * matrix).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = dots / (norms * qn)
    out[norms == 0] = 0.0
    return out


@dataclass
class EmbedderDescriptor:
    name: str
    kind: str  # "hash" | "file"
    dim: int
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise EmbeddingError("embedder name must be non-empty")
        if self.kind not in ("hash", "file"):
            raise EmbeddingError(f"unknown embedder kind {self.kind!r}")
        if self.dim < 2:
            raise EmbeddingError(f"embedder dim must be >= 2, got {self.dim}")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "dim": self.dim, "parameters": dict(self.parameters)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EmbedderDescriptor":
        return cls(d["name"], d["kind"], int(d["dim"]), dict(d.get("parameters", {})))


class Embedder(Protocol):
    descriptor: EmbedderDescriptor

    def embed(self, text: str) -> np.ndarray: ...


class HashEmbedder:
    def __init__(self, dim: int = DEFAULT_DIM, name: str = "fnv-hash"):
        self.descriptor = EmbedderDescriptor(name, "hash", dim)

    @property
    def dim(self) -> int:
        return self.descriptor.dim

    def embed(self, text: str) -> np.ndarray:
        return embed_hash(text, self.dim)


class FileEmbedder:
    """Looks up externally computed vectors by exact span text.

    Text that matches no indexed span has no vector available and embeds to
    zero, so embedding-mode queries with it are rejected upstream.
    """

    def __init__(self, store: "EmbeddingStore", texts: Mapping[int, str], name: str = "file", path: str = ""):
        self.descriptor = EmbedderDescriptor(name, "file", store.dim, {"path": path} if path else {})
        self._by_text: dict[str, np.ndarray] = {}
        for span_id in sorted(int(i) for i in store.ids()):
            text = texts.get(span_id)
            if text is not None:
                self._by_text.setdefault(text, store.get(span_id))

    def embed(self, text: str) -> np.ndarray:
        vec = self._by_text.get(" ".join(text.split()))
        return vec.copy() if vec is not None else np.zeros(self.descriptor.dim)


def make_embedder(descriptor: EmbedderDescriptor, store: "EmbeddingStore | None" = None, texts=None) -> Embedder:
    if descriptor.kind == "hash":
        return HashEmbedder(descriptor.dim, descriptor.name)
    if store is None or texts is None:
        raise EmbeddingError("file embedder needs the loaded store and span texts")
    return FileEmbedder(store, texts, descriptor.name, descriptor.parameters.get("path", ""))


class EmbeddingStore:
    """Immutable span_id -> unit vector mapping backed by one matrix."""

    def __init__(self, ids: Iterable[int], matrix: np.ndarray):
        self._ids = np.asarray(list(ids), dtype=np.uint64)
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or len(matrix) != len(self._ids):
            raise EmbeddingError("ids and matrix rows disagree")
        if not np.all(np.isfinite(matrix)):
            raise EmbeddingError("embedding components must be finite")
        self.matrix = matrix
        self.matrix.flags.writeable = False
        self._row = {int(i): r for r, i in enumerate(self._ids)}
        if len(self._row) != len(self._ids):
            raise EmbeddingError("duplicate span_id in embedding store")

    @classmethod
    def from_texts(cls, items: Iterable[tuple[int, str]], embedder: Embedder) -> "EmbeddingStore":
        items = list(items)
        dim = embedder.descriptor.dim
        matrix = np.zeros((len(items), dim))
        for r, (_, text) in enumerate(items):
            matrix[r] = embedder.embed(text)
        return cls([i for i, _ in items], matrix)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, span_id: int) -> bool:
        return span_id in self._row

    def ids(self) -> np.ndarray:
        return self._ids

    def row_of(self, span_id: int) -> int | None:
        return self._row.get(span_id)

    def get(self, span_id: int) -> np.ndarray | None:
        r = self._row.get(span_id)
        return None if r is None else self.matrix[r]

    # binary codec: magic, n, dim, ids (u64), matrix (f64, row-major)
    _MAGIC = b"PAVEC001"

    def to_bytes(self) -> bytes:
        head = self._MAGIC + struct.pack("<QQ", len(self), self.dim)
        return head + self._ids.astype("<u8").tobytes() + self.matrix.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        if data[:8] != cls._MAGIC or len(data) < 24:
            raise EmbeddingError("not an embedding store file")
        n, dim = struct.unpack_from("<QQ", data, 8)
        if len(data) != 24 + 8 * n + 8 * n * dim:
            raise EmbeddingError("embedding store file has the wrong size")
        ids = np.frombuffer(data, dtype="<u8", count=n, offset=24)
        matrix = np.frombuffer(data, dtype="<f8", count=n * dim, offset=24 + 8 * n).reshape(n, dim)
        return cls(ids.tolist(), matrix.copy())


def load_embeddings(stream: IO[bytes] | IO[str]) -> EmbeddingStore:
    """Read the ``#dim=<d>`` / ``span_id<TAB>v1,...,vd`` text format.

    Rows are L2-normalized on load. Errors name the 1-based data row.
    """
    text = stream.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#dim="):
        raise EmbeddingError("vector file must start with a '#dim=<d>' header")
    try:
        dim = int(lines[0][len("#dim=") :])
    except ValueError:
        raise EmbeddingError(f"bad header {lines[0]!r}") from None
    if dim < 2:
        raise EmbeddingError(f"dim must be >= 2, got {dim}")

    ids: list[int] = []
    rows: list[list[float]] = []
    seen: set[int] = set()
    for row_no, line in enumerate(lines[1:], start=1):
        try:
            id_part, vec_part = line.split("\t")
            span_id = int(id_part)
            values = [float(v) for v in vec_part.split(",")]
        except ValueError:
            raise EmbeddingError(f"row {row_no}: malformed line") from None
        if span_id < 0:
            raise EmbeddingError(f"row {row_no}: negative span_id")
        if span_id in seen:
            raise EmbeddingError(f"row {row_no}: duplicate span_id {span_id}")
        if len(values) != dim:
            raise EmbeddingError(f"row {row_no}: expected dim {dim}, got {len(values)}")
        if not all(math.isfinite(v) for v in values):
            raise EmbeddingError(f"row {row_no}: non-finite component")
        norm = math.sqrt(sum(v * v for v in values))
        if norm == 0.0:
            raise EmbeddingError(f"row {row_no}: zero vector")
        seen.add(span_id)
        ids.append(span_id)
        rows.append([v / norm for v in values])
    matrix = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return EmbeddingStore(ids, matrix)


def dump_embeddings(store: EmbeddingStore, stream: IO[str]) -> None:
    stream.write(f"#dim={store.dim}\n")
    for span_id, row in zip(store.ids(), store.matrix):
        stream.write(f"{int(span_id)}\t{','.join(repr(float(v)) for v in row)}\n")


def dumps_embeddings(store: EmbeddingStore) -> str:
    buf = io.StringIO()
    dump_embeddings(store, buf)
    return buf.getvalue()
