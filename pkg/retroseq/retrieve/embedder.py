"""Frozen embedders mapping token sequences to datastore keys.

Keys must never change once written to a database, so the embedders in this
module are training-free and fully determined by their id.
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from retroseq.util import RetroSeqError, stable_hash64

logger = logging.getLogger(__name__)

DEFAULT_EMBEDDER_ID = "hashed-ngram-v1"
DEFAULT_DIM = 256
DEFAULT_BUCKETS = 2**16

CODE_NAMESPACE = "code"
INTENT_NAMESPACE = "intent"


class EmptySequenceError(RetroSeqError, ValueError):
    """Raised when an empty token sequence is embedded."""


class MissingEmbeddingError(RetroSeqError, KeyError):
    """Raised when a precomputed embedding file has no entry for a sequence."""


class FrozenEmbedder:
    """Hashed n-gram random-projection embedder.

    A sequence is represented by the counts of its unigrams and bigrams hashed
    into ``buckets`` bins. The count vector is multiplied by a fixed Gaussian
    projection whose rows are generated on demand from the embedder id, and
    the result is L2 normalized.

    Args:
        embedder_id: Identifier seeding the projection. Embedders with the
            same id give bit-identical outputs.
        dim: The output dimension.
        buckets: The number of hash bins.
    """

    def __init__(
        self,
        embedder_id: str = DEFAULT_EMBEDDER_ID,
        dim: int = DEFAULT_DIM,
        buckets: int = DEFAULT_BUCKETS,
    ):
        self.embedder_id = embedder_id
        self.dim = dim
        self.buckets = buckets
        self._seed = stable_hash64(embedder_id, dim, buckets)
        self._rows: dict[int, np.ndarray] = {}

    def __repr__(self):
        return f"FrozenEmbedder({self.embedder_id!r}, dim={self.dim})"

    def _row(self, bucket: int) -> np.ndarray:
        row = self._rows.get(bucket)
        if row is None:
            rng = np.random.default_rng([self._seed, bucket])
            row = rng.standard_normal(self.dim)
            self._rows[bucket] = row
        return row

    def _bucket(self, namespace: str, *tokens: int) -> int:
        return stable_hash64(self._seed, namespace, *tokens) % self.buckets

    def _embed(self, tokens: Sequence[int], namespace: str) -> np.ndarray:
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise EmptySequenceError(f"cannot embed an empty {namespace} sequence")

        counts = Counter(self._bucket(namespace, t) for t in tokens)
        counts.update(self._bucket(namespace, a, b) for a, b in zip(tokens, tokens[1:]))

        vector = np.zeros(self.dim, dtype=np.float64)
        for bucket in sorted(counts):
            vector += counts[bucket] * self._row(bucket)
        vector /= np.linalg.norm(vector)
        return vector.astype(np.float32)

    def embed_code(self, tokens: Sequence[int]) -> np.ndarray:
        """Embeds a sequence of code token ids.

        Args:
            tokens: The token ids.

        Returns:
            A unit-norm vector of length :attr:`dim`.
        """
        return self._embed(tokens, CODE_NAMESPACE)

    def embed_intent(self, tokens: Sequence[int]) -> np.ndarray:
        """Embeds a sequence of natural language token ids.

        Args:
            tokens: The token ids.

        Returns:
            A unit-norm vector of length :attr:`dim`.
        """
        return self._embed(tokens, INTENT_NAMESPACE)


def sequence_hash(tokens: Sequence[int]) -> int:
    """Gets the 64-bit hash identifying a sequence in an embedding file.

    The hash is the 8-byte BLAKE2b digest of the token ids encoded as
    little-endian unsigned 32-bit integers, read as a little-endian integer.
    """
    data = np.asarray(tokens, dtype="<u4").tobytes()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class PrecomputedEmbedder:
    """Embedder reading vectors from a precomputed embedding file.

    The file holds one record per sequence: the sequence hash as a
    little-endian ``u64`` followed by ``dim`` little-endian ``f32`` values.
    Code and intent sequences share the same table.

    Args:
        filename: The embedding file.
        dim: The vector dimension.
    """

    def __init__(self, filename: str | Path, dim: int):
        self.filename = str(filename)
        self.dim = dim
        self.embedder_id = f"file:{dim}:{self.filename}"

        record = np.dtype([("hash", "<u8"), ("vector", "<f4", (dim,))])
        raw = Path(filename).read_bytes()
        if len(raw) % record.itemsize:
            raise RetroSeqError(
                f"{filename} is not a whole number of {record.itemsize}-byte records"
            )
        records = np.frombuffer(raw, dtype=record)
        self._vectors = {
            int(h): v.astype(np.float32) for h, v in zip(records["hash"], records["vector"])
        }
        logger.info("loaded %d precomputed embeddings from %s", len(self._vectors), filename)

    def __repr__(self):
        return f"PrecomputedEmbedder({self.filename!r}, dim={self.dim})"

    def _lookup(self, tokens: Sequence[int]) -> np.ndarray:
        if len(tokens) == 0:
            raise EmptySequenceError("cannot embed an empty sequence")
        key = sequence_hash(tokens)
        try:
            return self._vectors[key].copy()
        except KeyError:
            raise MissingEmbeddingError(
                f"{self.filename} has no embedding for sequence hash {key:016x}"
            ) from None

    def embed_code(self, tokens: Sequence[int]) -> np.ndarray:
        return self._lookup(tokens)

    def embed_intent(self, tokens: Sequence[int]) -> np.ndarray:
        return self._lookup(tokens)


def write_embedding_file(filename: str | Path, sequences: Sequence[Sequence[int]], vectors: np.ndarray):
    """Writes vectors in the precomputed embedding file format.

    Args:
        filename: The output file.
        sequences: The token sequences, one per vector.
        vectors: The vectors, shape ``(len(sequences), dim)``.
    """
    vectors = np.asarray(vectors, dtype="<f4")
    record = np.dtype([("hash", "<u8"), ("vector", "<f4", (vectors.shape[1],))])
    records = np.empty(len(sequences), dtype=record)
    records["hash"] = [sequence_hash(s) for s in sequences]
    records["vector"] = vectors
    Path(filename).write_bytes(records.tobytes())


def get_embedder(embedder_id: str, dim: int = DEFAULT_DIM) -> FrozenEmbedder | PrecomputedEmbedder:
    """Gets the embedder identified by an id.

    Args:
        embedder_id: Either a hashed embedder id, or ``file:<dim>:<path>`` for a
            precomputed embedding file.
        dim: Output dimension of hashed embedders.

    Returns:
        The embedder.
    """
    if embedder_id.startswith("file:"):
        _, file_dim, filename = embedder_id.split(":", 2)
        return PrecomputedEmbedder(filename, int(file_dim))
    return FrozenEmbedder(embedder_id, dim=dim)
