"""Forest of random-projection trees for angular nearest-neighbor search.

Each tree splits its items with a hyperplane between two sampled points
(the two-means construction), recursing until a node holds at most
``leaf_capacity`` items. Queries walk all trees best-first from one shared
priority queue.
"""

from __future__ import annotations

import hashlib
import heapq
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .embedding import EmbeddingStore, cosine_rows
from .lexical import ScoredSpan

MAGIC = b"PAANNF\x00\x01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIQ32sQ")  # magic, version, dim, n_trees, leaf_capacity, seed, sha256, payload length

DEFAULT_TREES = 50
DEFAULT_LEAF_CAPACITY = 16
_SPLIT_ATTEMPTS = 3
_MEANS_ITERS = 3
_MEANS_SAMPLE = 256


class AnnError(ValueError):
    pass


class UnsupportedVersionError(AnnError):
    pass


@dataclass(frozen=True)
class AnnQueryBudget:
    k: int
    search_k: int | None = None

    def resolve(self, n_trees: int) -> int:
        search_k = self.search_k if self.search_k is not None else n_trees * self.k * 4
        if self.k < 1:
            raise AnnError(f"k must be >= 1, got {self.k}")
        if search_k < self.k:
            raise AnnError(f"search_k ({search_k}) must be >= k ({self.k})")
        return search_k


class _TreeBuilder:
    def __init__(self, vectors: np.ndarray, leaf_capacity: int):
        self.vectors = vectors
        self.leaf_capacity = leaf_capacity
        self.normals: list[np.ndarray] = []
        self.offsets: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_start: list[int] = []
        self.leaf_len: list[int] = []
        self.leaf_items: list[np.ndarray] = []
        self._leaf_cursor = 0

    def _new_node(self) -> int:
        self.normals.append(None)
        self.offsets.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_start.append(0)
        self.leaf_len.append(0)
        return len(self.left) - 1

    def _two_means(self, pts: np.ndarray, rng: np.random.Generator):
        """Two angular centroids seeded by a random pair, refined on a sample."""
        i, j = rng.choice(len(pts), size=2, replace=False)
        a, c = pts[i], pts[j]
        sample = pts
        if len(pts) > _MEANS_SAMPLE:
            sample = pts[rng.choice(len(pts), size=_MEANS_SAMPLE, replace=False)]
        total = sample.sum(axis=0)
        for _ in range(_MEANS_ITERS):
            na, nc = math.sqrt(float(a @ a)), math.sqrt(float(c @ c))
            if na == 0.0 or nc == 0.0:
                break
            to_c = (sample @ (c / nc - a / na)) > 0
            n_c = int(to_c.sum())
            if n_c == 0 or n_c == len(sample):
                break
            sum_c = to_c.astype(np.float64) @ sample
            a, c = (total - sum_c) / (len(sample) - n_c), sum_c / n_c
        return a, c

    def _split(self, items: np.ndarray, rng: np.random.Generator):
        pts = self.vectors[items]
        for _ in range(_SPLIT_ATTEMPTS):
            a, c = self._two_means(pts, rng)
            diff = a - c
            norm = math.sqrt(float(diff @ diff))
            if norm == 0.0:
                continue
            normal = diff / norm
            offset = float(normal @ ((a + c) / 2))
            side = pts @ normal - offset >= 0
            n_right = int(side.sum())
            if 0 < n_right < len(items):
                return normal, offset, items[~side], items[side]
        # degenerate: balanced random split under a random hyperplane
        normal = rng.standard_normal(self.vectors.shape[1])
        normal /= np.linalg.norm(normal)
        perm = rng.permutation(len(items))
        half = len(items) // 2
        offset = float(normal @ pts.mean(axis=0))
        return normal, offset, items[np.sort(perm[:half])], items[np.sort(perm[half:])]

    def build(self, rng: np.random.Generator) -> int:
        root = self._new_node()
        stack = [(root, np.arange(len(self.vectors)))]
        while stack:
            node, items = stack.pop()
            if len(items) <= self.leaf_capacity:
                self.leaf_start[node] = self._leaf_cursor
                self.leaf_len[node] = len(items)
                self.leaf_items.append(items)
                self._leaf_cursor += len(items)
                continue
            normal, offset, lo, hi = self._split(items, rng)
            self.normals[node] = normal
            self.offsets[node] = offset
            left, right = self._new_node(), self._new_node()
            self.left[node], self.right[node] = left, right
            stack.append((right, hi))
            stack.append((left, lo))
        return root


class AnnForest:
    def __init__(
        self,
        ids: np.ndarray,
        vectors: np.ndarray,
        leaf_capacity: int,
        seed: int,
        roots: np.ndarray,
        normals: np.ndarray,
        offsets: np.ndarray,
        left: np.ndarray,
        right: np.ndarray,
        leaf_start: np.ndarray,
        leaf_len: np.ndarray,
        leaf_items: np.ndarray,
    ):
        self.ids = ids
        self.vectors = vectors
        self.leaf_capacity = leaf_capacity
        self.seed = seed
        self.roots = roots
        self.normals = normals
        self.offsets = offsets
        self.left = left
        self.right = right
        self.leaf_start = leaf_start
        self.leaf_len = leaf_len
        self.leaf_items = leaf_items
        self._row_of = {int(i): r for r, i in enumerate(ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def build(
        cls,
        store: EmbeddingStore,
        n_trees: int = DEFAULT_TREES,
        leaf_capacity: int = DEFAULT_LEAF_CAPACITY,
        seed: int = 0,
    ) -> "AnnForest":
        if len(store) == 0:
            raise AnnError("cannot build a forest over an empty store")
        if n_trees < 1:
            raise AnnError("n_trees must be >= 1")
        if leaf_capacity < 1:
            raise AnnError("leaf_capacity must be >= 1")
        vectors = np.array(store.matrix, dtype=np.float64)
        dim = vectors.shape[1]
        normals, offsets, left, right, lstart, llen, items = [], [], [], [], [], [], []
        roots = []
        node_base = item_base = 0
        for t in range(n_trees):
            rng = np.random.default_rng([seed, t])
            tb = _TreeBuilder(vectors, leaf_capacity)
            roots.append(node_base + tb.build(rng))
            normals.extend(n if n is not None else np.zeros(dim) for n in tb.normals)
            offsets.extend(tb.offsets)
            left.extend(c + node_base if c >= 0 else -1 for c in tb.left)
            right.extend(c + node_base if c >= 0 else -1 for c in tb.right)
            lstart.extend(s + item_base for s in tb.leaf_start)
            llen.extend(tb.leaf_len)
            items.extend(tb.leaf_items)
            node_base += len(tb.left)
            item_base += tb._leaf_cursor
        return cls(
            ids=np.array(store.ids(), dtype=np.uint64),
            vectors=vectors,
            leaf_capacity=leaf_capacity,
            seed=seed,
            roots=np.array(roots, dtype=np.int64),
            normals=np.array(normals, dtype=np.float64).reshape(-1, dim),
            offsets=np.array(offsets, dtype=np.float64),
            left=np.array(left, dtype=np.int64),
            right=np.array(right, dtype=np.int64),
            leaf_start=np.array(lstart, dtype=np.int64),
            leaf_len=np.array(llen, dtype=np.int64),
            leaf_items=np.concatenate(items).astype(np.int64),
        )

    # ------------------------------------------------------------------

    def leaves(self, tree: int) -> list[np.ndarray]:
        """Item rows of every leaf of one tree, in depth-first order."""
        out, stack = [], [int(self.roots[tree])]
        while stack:
            node = stack.pop()
            if self.left[node] < 0:
                s = self.leaf_start[node]
                out.append(self.leaf_items[s : s + self.leaf_len[node]])
            else:
                stack.append(int(self.right[node]))
                stack.append(int(self.left[node]))
        return out

    def candidates(self, q: np.ndarray, search_k: int) -> np.ndarray:
        """Rows of distinct items gathered best-first until ``search_k`` are seen."""
        if search_k >= len(self.ids):
            # the walk would end only after reaching every item, so skip it
            return np.arange(len(self.ids))
        left, right, normals, offsets = self.left, self.right, self.normals, self.offsets
        heap = [(-math.inf, int(r)) for r in self.roots]
        heapq.heapify(heap)
        seen = np.zeros(len(self.ids), dtype=bool)
        found = 0
        chunks = []
        while heap and found < search_k:
            neg_pri, node = heapq.heappop(heap)
            pri = -neg_pri
            lc = left[node]
            if lc < 0:
                s = self.leaf_start[node]
                leaf = self.leaf_items[s : s + self.leaf_len[node]]
                fresh = leaf[~seen[leaf]]
                if len(fresh):
                    seen[fresh] = True
                    found += len(fresh)
                    chunks.append(fresh)
                continue
            margin = float(normals[node] @ q) - offsets[node]
            heapq.heappush(heap, (-min(pri, margin), int(right[node])))
            heapq.heappush(heap, (-min(pri, -margin), int(lc)))
        if not chunks:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(chunks)

    def query(self, q, budget: AnnQueryBudget | int, search_k: int | None = None) -> list[ScoredSpan]:
        if isinstance(budget, int):
            budget = AnnQueryBudget(budget, search_k)
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise AnnError(f"query dimension {q.shape} does not match forest dim {self.dim}")
        limit = budget.resolve(self.n_trees)
        rows = self.candidates(q, limit)
        scores = cosine_rows(self.vectors[rows], q)
        ids = self.ids[rows]
        order = np.lexsort((ids, -scores))[: budget.k]
        return [ScoredSpan(int(ids[i]), float(scores[i]), r) for r, i in enumerate(order, start=1)]

    def exact(self, q, k: int) -> list[ScoredSpan]:
        """Brute-force top-k over every stored vector (same scoring as :meth:`query`)."""
        q = np.asarray(q, dtype=np.float64)
        scores = cosine_rows(self.vectors, q)
        order = np.lexsort((self.ids, -scores))[:k]
        return [ScoredSpan(int(self.ids[i]), float(scores[i]), r) for r, i in enumerate(order, start=1)]

    # ------------------------------------------------------------------
    # persistence

    _ARRAYS = ("ids", "vectors", "roots", "normals", "offsets", "left", "right", "leaf_start", "leaf_len", "leaf_items")

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **{name: getattr(self, name) for name in self._ARRAYS})
        payload = buf.getvalue()
        header = _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            self.dim,
            self.n_trees,
            self.leaf_capacity,
            self.seed,
            hashlib.sha256(payload).digest(),
            len(payload),
        )
        return header + payload

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "AnnForest":
        if len(data) < _HEADER.size:
            raise AnnError("truncated forest file")
        magic, version, dim, n_trees, leaf_capacity, seed, digest, length = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise AnnError("not a forest file")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(f"unsupported forest format version {version}")
        payload = data[_HEADER.size :]
        if len(payload) != length:
            raise AnnError("truncated forest file")
        if hashlib.sha256(payload).digest() != digest:
            raise AnnError("forest checksum mismatch")
        with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
            arrays = {name: npz[name] for name in cls._ARRAYS}
        forest = cls(leaf_capacity=leaf_capacity, seed=seed, **arrays)
        if forest.dim != dim or forest.n_trees != n_trees:
            raise AnnError("forest header disagrees with payload")
        return forest

    @classmethod
    def load(cls, path) -> "AnnForest":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def ann_build(store, n_trees=DEFAULT_TREES, leaf_capacity=DEFAULT_LEAF_CAPACITY, seed=0) -> AnnForest:
    return AnnForest.build(store, n_trees, leaf_capacity, seed)


def ann_query(forest: AnnForest, q, budget: AnnQueryBudget) -> list[ScoredSpan]:
    return forest.query(q, budget)
