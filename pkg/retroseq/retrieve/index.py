"""Nearest-neighbour indexes over datastore keys.

Two backends are provided: an exact linear scan, and an inverted-file index
that clusters the keys with k-means and only scans the lists whose centroids
are closest to the query.
"""
from __future__ import annotations

import logging
import math
import warnings

import numpy as np
from scipy.cluster.vq import kmeans2

logger = logging.getLogger(__name__)

EXACT_THRESHOLD = 50_000
DEFAULT_N_PROBE = 8
MAX_TRAINING_POINTS = 32_768


def l2_distances(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Gets the L2 distance between a query and every key, in 64-bit precision."""
    diff = keys.astype(np.float64) - np.asarray(query, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def select_nearest(
    distances: np.ndarray,
    ordinals: np.ndarray,
    source_ids: np.ndarray,
    k: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Selects the ``k`` nearest candidates with deterministic tie-breaking.

    Ties in distance are broken by lower source id, then by lower ordinal.

    Args:
        distances: Distance of each candidate.
        ordinals: Entry ordinal of each candidate.
        source_ids: Source id of every entry in the database.
        k: Number of results.

    Returns:
        The selected ordinals and their distances, nearest first.
    """
    if len(distances) == 0:
        return ordinals[:0], distances[:0]
    if len(distances) > k:
        kth = np.partition(distances, k - 1)[k - 1]
        keep = distances <= kth
        distances, ordinals = distances[keep], ordinals[keep]
    order = np.lexsort((ordinals, source_ids[ordinals], distances))[:k]
    return ordinals[order], distances[order]


class ExactIndex:
    """Linear-scan index returning the exact nearest neighbours."""

    backend = "exact"

    def __init__(self, keys: np.ndarray):
        self.keys = keys

    def __len__(self):
        return len(self.keys)

    def search(
        self,
        query: np.ndarray,
        k: int,
        source_ids: np.ndarray,
        allowed: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Finds the nearest keys to a query.

        Args:
            query: The query vector.
            k: Number of neighbours.
            source_ids: Source id of every entry, used for tie-breaking.
            allowed: Optional boolean mask of the entries that may be returned.

        Returns:
            The ordinals and distances of the neighbours, nearest first.
        """
        ordinals = np.arange(len(self.keys))
        keys = self.keys
        if allowed is not None:
            ordinals = ordinals[allowed]
            keys = keys[allowed]
        return select_nearest(l2_distances(keys, query), ordinals, source_ids, k)


class IVFIndex:
    """Inverted-file index with a k-means coarse quantizer.

    Args:
        keys: The keys, shape ``(n, d)``.
        n_lists: Number of clusters. Defaults to ``round(sqrt(n))``.
        n_probe: Number of lists scanned per query.
        seed: Seed of the k-means initialization.
    """

    backend = "ivf"

    def __init__(
        self,
        keys: np.ndarray,
        n_lists: int | None = None,
        n_probe: int = DEFAULT_N_PROBE,
        seed: int = 0,
    ):
        self.keys = keys
        self.n_probe = n_probe
        n = len(keys)
        self.n_lists = max(1, min(n, n_lists or round(math.sqrt(n))))

        data = keys.astype(np.float64)
        rng = np.random.default_rng(seed)
        sample = data
        if n > MAX_TRAINING_POINTS:
            sample = data[np.sort(rng.choice(n, MAX_TRAINING_POINTS, replace=False))]
        with warnings.catch_warnings():
            # empty clusters are tolerated, their lists stay empty
            warnings.simplefilter("ignore", UserWarning)
            centroids, _ = kmeans2(sample, self.n_lists, minit="++", seed=rng)
        self.centroids = centroids

        labels = self._nearest_centroids(data)
        order = np.argsort(labels, kind="stable")
        bounds = np.searchsorted(labels[order], np.arange(self.n_lists + 1))
        self.lists = [order[bounds[i] : bounds[i + 1]] for i in range(self.n_lists)]
        logger.debug(
            "trained inverted index: %d keys, %d lists, largest list %d",
            n,
            self.n_lists,
            max(len(members) for members in self.lists),
        )

    def __len__(self):
        return len(self.keys)

    def _nearest_centroids(self, data: np.ndarray) -> np.ndarray:
        sq_norms = (self.centroids**2).sum(axis=1)
        labels = np.empty(len(data), dtype=np.int64)
        for start in range(0, len(data), 8192):
            block = data[start : start + 8192]
            scores = sq_norms[None, :] - 2.0 * block @ self.centroids.T
            labels[start : start + 8192] = scores.argmin(axis=1)
        return labels

    def search(
        self,
        query: np.ndarray,
        k: int,
        source_ids: np.ndarray,
        allowed: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Finds approximate nearest keys to a query.

        At least ``n_probe`` lists are scanned, and more are added in order of
        centroid distance until ``k`` allowed candidates have been seen.

        Args:
            query: The query vector.
            k: Number of neighbours.
            source_ids: Source id of every entry, used for tie-breaking.
            allowed: Optional boolean mask of the entries that may be returned.

        Returns:
            The ordinals and distances of the neighbours, nearest first.
        """
        centroid_distances = l2_distances(self.centroids, query)
        probe_order = np.argsort(centroid_distances, kind="stable")

        candidates = []
        found = 0
        for probed, list_id in enumerate(probe_order):
            if probed >= self.n_probe and found >= k:
                break
            members = self.lists[list_id]
            if allowed is not None:
                members = members[allowed[members]]
            candidates.append(members)
            found += len(members)

        ordinals = np.sort(np.concatenate(candidates)) if candidates else np.arange(0)
        distances = l2_distances(self.keys[ordinals], query)
        return select_nearest(distances, ordinals, source_ids, k)


def build_index(
    keys: np.ndarray,
    backend: str = "auto",
    n_probe: int = DEFAULT_N_PROBE,
    seed: int = 0,
) -> ExactIndex | IVFIndex:
    """Builds a nearest-neighbour index.

    Args:
        keys: The keys, shape ``(n, d)``.
        backend: ``"exact"``, ``"ivf"``, or ``"auto"`` to use the exact backend
            below 50,000 keys.
        n_probe: Lists scanned per query by the inverted-file backend.
        seed: Seed of the inverted-file k-means.

    Returns:
        The index.
    """
    if backend == "auto":
        backend = "exact" if len(keys) < EXACT_THRESHOLD else "ivf"
    if backend == "exact":
        return ExactIndex(keys)
    if backend == "ivf":
        return IVFIndex(keys, n_probe=n_probe, seed=seed)
    raise ValueError(f"unknown index backend: {backend}")
