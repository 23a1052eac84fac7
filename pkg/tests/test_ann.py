import numpy as np
import pytest

from priorart.ann import (
    MAGIC,
    AnnError,
    AnnForest,
    AnnQueryBudget,
    UnsupportedVersionError,
    _HEADER,
)
from priorart.embedding import EmbeddingStore
from synth import brute_cosine_topk


def unit_store(n, dim, seed=0, ids=None):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((n, dim))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return EmbeddingStore(range(n) if ids is None else ids, m)


@pytest.fixture(scope="module")
def big():
    store = unit_store(10_000, 32, seed=4)
    return store, AnnForest.build(store, n_trees=50, leaf_capacity=16, seed=9)


def test_small_store_single_leaf():
    forest = AnnForest.build(unit_store(12, 8), n_trees=3, leaf_capacity=16)
    for t in range(3):
        leaves = forest.leaves(t)
        assert len(leaves) == 1 and sorted(leaves[0].tolist()) == list(range(12))


def test_same_seed_same_forest():
    store = unit_store(500, 16)
    a = AnnForest.build(store, 5, 8, seed=42)
    b = AnnForest.build(store, 5, 8, seed=42)
    c = AnnForest.build(store, 5, 8, seed=43)
    for name in AnnForest._ARRAYS:
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.normals, c.normals)


def test_every_tree_partitions_all_ids(big):
    store, forest = big
    for t in range(forest.n_trees):
        rows = np.concatenate(forest.leaves(t))
        assert len(rows) == len(store)
        assert np.array_equal(np.sort(rows), np.arange(len(store)))
        assert max(len(leaf) for leaf in forest.leaves(t)) <= 16


def test_internal_normals_are_unit(big):
    _, forest = big
    internal = forest.left >= 0
    norms = np.linalg.norm(forest.normals[internal], axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_self_match_under_exhaustive_budget(big):
    store, forest = big
    for row in (0, 1234, 9999):
        hits = forest.query(store.matrix[row], AnnQueryBudget(5, len(store)))
        assert hits[0].span_id == row
        assert hits[0].score == pytest.approx(1.0, abs=1e-12)


def test_k_larger_than_store():
    store = unit_store(30, 8)
    forest = AnnForest.build(store, 4, 4)
    hits = forest.query(store.matrix[0], AnnQueryBudget(100, 100))
    assert len(hits) == 30
    assert [h.rank for h in hits] == list(range(1, 31))


def test_recall_non_decreasing_and_exact_at_full_budget(big):
    store, forest = big
    rng = np.random.default_rng(1)
    for _ in range(10):
        q = rng.standard_normal(32)
        truth = brute_cosine_topk(store.matrix, store.ids(), q, 10)
        prev = -1
        for search_k in (20, 100, 500, 2000, 10_000):
            got = [h.span_id for h in forest.query(q, AnnQueryBudget(10, search_k))]
            recall = len(set(got) & set(truth))
            assert recall >= prev
            prev = recall
        assert got == truth


def test_walk_reaches_every_item():
    store = unit_store(500, 8, seed=3)
    forest = AnnForest.build(store, 5, 8, seed=1)
    q = np.ones(8)
    # one short of the store size still walks the trees, and a whole-leaf
    # collection can overshoot but never repeats an item
    rows = forest.candidates(q, len(store) - 1)
    assert len(rows) == len(set(rows.tolist())) >= len(store) - 1
    assert sorted(forest.candidates(q, len(store)).tolist()) == list(range(len(store)))


def test_candidates_sound():
    ids = [1000 + 7 * i for i in range(300)]
    store = unit_store(300, 8, ids=ids)
    forest = AnnForest.build(store, 6, 8, seed=2)
    hits = forest.query(np.ones(8), AnnQueryBudget(20))
    assert {h.span_id for h in hits} <= set(ids)


def test_duplicate_vectors_terminate():
    store = EmbeddingStore(range(200), np.tile([1.0, 0.0, 0.0], (200, 1)))
    forest = AnnForest.build(store, 3, 4, seed=0)
    for t in range(3):
        assert sorted(np.concatenate(forest.leaves(t)).tolist()) == list(range(200))
    assert len(forest.query([1.0, 0.0, 0.0], AnnQueryBudget(10, 200))) == 10


def test_errors():
    with pytest.raises(AnnError):
        AnnForest.build(EmbeddingStore([], np.zeros((0, 4))))
    forest = AnnForest.build(unit_store(10, 4), 2, 4)
    with pytest.raises(AnnError):
        forest.query(np.ones(5), AnnQueryBudget(3))
    with pytest.raises(AnnError):
        forest.query(np.ones(4), AnnQueryBudget(5, 4))
    with pytest.raises(AnnError):
        forest.query(np.ones(4), AnnQueryBudget(0))


def test_default_search_k():
    assert AnnQueryBudget(10).resolve(50) == 2000


# ---------------------------------------------------------------- persistence


def test_save_load_answers_identically():
    store = unit_store(2000, 16, seed=3)
    forest = AnnForest.build(store, 10, 16, seed=5)
    again = AnnForest.from_bytes(forest.to_bytes())
    rng = np.random.default_rng(8)
    for _ in range(100):
        q = rng.standard_normal(16)
        assert again.query(q, AnnQueryBudget(10, 200)) == forest.query(q, AnnQueryBudget(10, 200))


def test_truncated_stream_rejected():
    data = AnnForest.build(unit_store(50, 4), 2, 4).to_bytes()
    for cut in (10, _HEADER.size, len(data) - 1):
        with pytest.raises(AnnError):
            AnnForest.from_bytes(data[:cut])


def test_version_2_rejected():
    data = bytearray(AnnForest.build(unit_store(50, 4), 2, 4).to_bytes())
    data[8:12] = (2).to_bytes(4, "little")
    with pytest.raises(UnsupportedVersionError):
        AnnForest.from_bytes(bytes(data))


def test_checksum_mismatch_rejected():
    data = bytearray(AnnForest.build(unit_store(50, 4), 2, 4).to_bytes())
    data[-20] ^= 0xFF
    with pytest.raises(AnnError, match="checksum"):
        AnnForest.from_bytes(bytes(data))
    assert bytes(data[:8]) == MAGIC
