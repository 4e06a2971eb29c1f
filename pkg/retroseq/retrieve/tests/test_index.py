from __future__ import annotations

import time

import numpy as np
import pytest

from retroseq.retrieve.index import ExactIndex, IVFIndex, build_index, select_nearest
from retroseq.tests import RetroSeqTest


def clustered_keys(rng: np.random.Generator, n: int, dim: int, clusters: int = 100) -> np.ndarray:
    """Gets keys drawn from a mixture of well separated Gaussian clusters."""
    centres = rng.standard_normal((clusters, dim))
    labels = rng.integers(clusters, size=n)
    return (centres[labels] + 0.05 * rng.standard_normal((n, dim))).astype(np.float32)


def brute_force(keys: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    distances = np.sqrt(((keys.astype(np.float64) - query.astype(np.float64)) ** 2).sum(axis=1))
    return np.argsort(distances, kind="stable")[:k]


class TestExactIndex(RetroSeqTest):
    """Class to test the linear-scan index."""

    def setUp(self):
        rng = self.get_rng()
        self.keys = rng.standard_normal((10_000, 16)).astype(np.float32)
        self.queries = rng.standard_normal((100, 16)).astype(np.float32)
        self.source_ids = np.arange(10_000, dtype=np.uint64)

    def test_matches_brute_force(self):
        index = ExactIndex(self.keys)
        for query in self.queries:
            ordinals, distances = index.search(query, 2, self.source_ids)
            assert list(ordinals) == list(brute_force(self.keys, query, 2))
            assert np.all(np.diff(distances) >= 0)

    def test_stored_key(self):
        index = ExactIndex(self.keys)
        ordinals, distances = index.search(self.keys[123], 1, self.source_ids)
        assert list(ordinals) == [123]
        assert distances[0] == 0

    def test_k_larger_than_size(self):
        keys = self.keys[:5]
        ordinals, distances = ExactIndex(keys).search(self.queries[0], 10, self.source_ids)
        assert sorted(ordinals) == [0, 1, 2, 3, 4]
        assert np.all(np.diff(distances) >= 0)

    def test_allowed_mask(self):
        allowed = np.zeros(len(self.keys), dtype=bool)
        allowed[::2] = True
        ordinals, _ = ExactIndex(self.keys).search(self.keys[1], 3, self.source_ids, allowed)
        assert len(ordinals) == 3
        assert all(o % 2 == 0 for o in ordinals)


class TestSelectNearest(RetroSeqTest):
    """Class to test deterministic tie-breaking."""

    def test_ties(self):
        distances = np.array([1.0, 0.5, 0.5, 0.5, 2.0])
        ordinals = np.array([0, 1, 2, 3, 4])
        source_ids = np.array([10, 30, 20, 20, 0], dtype=np.uint64)

        selected, selected_distances = select_nearest(distances, ordinals, source_ids, 3)
        assert list(selected) == [2, 3, 1]
        assert list(selected_distances) == [0.5, 0.5, 0.5]

        selected, _ = select_nearest(distances, ordinals, source_ids, 2)
        assert list(selected) == [2, 3]

    def test_empty(self):
        selected, distances = select_nearest(
            np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.uint64), 2
        )
        assert len(selected) == 0
        assert len(distances) == 0


class TestIVFIndex(RetroSeqTest):
    """Class to test the inverted-file index."""

    def setUp(self):
        rng = self.get_rng(4)
        self.keys = clustered_keys(rng, 10_000, 16)
        self.queries = clustered_keys(self.get_rng(4), 100, 16)
        self.queries += 0.05 * rng.standard_normal(self.queries.shape).astype(np.float32)
        self.source_ids = np.arange(10_000, dtype=np.uint64)

    def test_lists_partition_keys(self):
        index = IVFIndex(self.keys, seed=0)
        assert index.n_lists == 100
        members = np.sort(np.concatenate(index.lists))
        assert np.array_equal(members, np.arange(len(self.keys)))

    def test_recall(self):
        index = IVFIndex(self.keys, seed=0)
        hits = 0
        for query in self.queries:
            ordinals, _ = index.search(query, 2, self.source_ids)
            hits += len(set(ordinals) & set(brute_force(self.keys, query, 2)))
        assert hits / (2 * len(self.queries)) >= 0.95

    def test_deterministic(self):
        first = IVFIndex(self.keys, seed=3)
        second = IVFIndex(self.keys, seed=3)
        assert np.array_equal(first.centroids, second.centroids)
        for query in self.queries[:10]:
            assert np.array_equal(
                first.search(query, 2, self.source_ids)[0],
                second.search(query, 2, self.source_ids)[0],
            )

    def test_probes_until_k_found(self):
        index = IVFIndex(self.keys, n_probe=1, seed=0)
        allowed = np.zeros(len(self.keys), dtype=bool)
        allowed[:3] = True
        ordinals, _ = index.search(self.queries[0], 3, self.source_ids, allowed)
        assert sorted(ordinals) == [0, 1, 2]

    @pytest.mark.slow
    def test_speedup(self):
        rng = self.get_rng(5)
        keys = clustered_keys(rng, 100_000, 32, clusters=300)
        queries = keys[rng.choice(len(keys), 1000, replace=False)]
        source_ids = np.arange(len(keys), dtype=np.uint64)

        exact = ExactIndex(keys)
        approximate = IVFIndex(keys, seed=0)

        start = time.perf_counter()
        for query in queries[:200]:
            exact.search(query, 2, source_ids)
        exact_time = (time.perf_counter() - start) / 200

        start = time.perf_counter()
        for query in queries:
            approximate.search(query, 2, source_ids)
        approximate_time = (time.perf_counter() - start) / len(queries)

        assert exact_time / approximate_time >= 5


class TestBuildIndex(RetroSeqTest):
    """Class to test index backend selection."""

    def test_backends(self):
        keys = self.get_rng().standard_normal((50, 4)).astype(np.float32)
        assert build_index(keys).backend == "exact"
        assert build_index(keys, backend="ivf").backend == "ivf"
        with pytest.raises(ValueError, match="unknown index backend"):
            build_index(keys, backend="faiss")
