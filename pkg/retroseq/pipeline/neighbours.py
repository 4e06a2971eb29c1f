"""Retrieval of the neighbours used by the decoder.

During training, chunk ``u >= 2`` of an example is given the neighbours of
its ground-truth chunk ``u - 1``. In hybrid databases, chunk 1 is given the
neighbours of the intent, searched among the intent-keyed entries only. The
same functions serve decoding, where the chunks come from the hypothesis.
"""
from __future__ import annotations

import logging
import warnings
from collections.abc import Iterator, Sequence

import numpy as np
from tqdm import tqdm

from retroseq.retrieve.datastore import (
    Database,
    DatabaseMode,
    EmptyDatabaseError,
    KeyKind,
    NeighbourSet,
    empty_neighbours,
)

logger = logging.getLogger(__name__)


def get_query_chunk(code_ids: Sequence[int], chunk: int, chunk_size: int) -> list[int]:
    """Gets the code tokens whose neighbours are attended by decoder chunk ``chunk``.

    Args:
        code_ids: The code token ids, without BOS.
        chunk: The 1-based decoder chunk, at least 2.
        chunk_size: The chunk size ``m``.

    Returns:
        Tokens ``(chunk - 2) * m`` to ``(chunk - 1) * m - 1``.
    """
    if chunk < 2:
        raise ValueError("only chunks after the first are retrieved with code")
    return list(code_ids[(chunk - 2) * chunk_size : (chunk - 1) * chunk_size])


def retrieve_chunk(
    db: Database,
    chunk: int,
    code_ids: Sequence[int],
    intent_ids: Sequence[int],
    k: int,
    exclude_source: int | None = None,
) -> NeighbourSet:
    """Retrieves the neighbours of one decoder chunk.

    Args:
        db: The database.
        chunk: The 1-based decoder chunk.
        code_ids: The code token ids generated so far, in a vocabulary that
            extends the database vocabulary.
        intent_ids: The intent in the database intent vocabulary.
        k: Number of neighbours.
        exclude_source: Source id whose entries are never returned.

    Returns:
        The neighbours. Chunk 1 of a classic database has none.
    """
    if chunk == 1:
        if db.mode != DatabaseMode.HYBRID:
            return empty_neighbours()
        query = db.embed_intent_ids(intent_ids)
        return db.query_k(query, k, exclude_source=exclude_source, key_kind=KeyKind.INTENT)

    tokens = get_query_chunk(code_ids, chunk, db.chunk_size)
    if len(tokens) != db.chunk_size:
        raise ValueError(f"chunk {chunk} needs {db.chunk_size} query tokens, got {len(tokens)}")
    query = db.embed_code_ids(tokens)
    return db.query_k(
        query, k, exclude_source=exclude_source, key_kind=KeyKind.CODE, query_tokens=tokens
    )


def as_values(neighbours: NeighbourSet, chunk_size: int) -> np.ndarray:
    """Gets the ``[N, F]`` records of a neighbour set, shape ``(k, 2m)``."""
    if not neighbours.records:
        return np.zeros((0, 2 * chunk_size), dtype=np.int64)
    return neighbours.values


class NeighbourCache:
    """Neighbour sets of every chunk of every training example.

    Args:
        chunk_size: The chunk size ``m``.
        entries: For each example, the neighbour set of each required chunk.
    """

    def __init__(self, chunk_size: int, entries: list[dict[int, NeighbourSet]]):
        self.chunk_size = chunk_size
        self.entries = entries

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index: int) -> dict[int, NeighbourSet]:
        return self.entries[index]

    def __iter__(self) -> Iterator[dict[int, NeighbourSet]]:
        return iter(self.entries)

    def values(self, index: int) -> dict[int, np.ndarray]:
        """Gets the records of example ``index``, keyed by chunk."""
        return {u: as_values(s, self.chunk_size) for u, s in self.entries[index].items()}

    def empty_count(self) -> int:
        """Gets the number of chunks without any neighbour."""
        return sum(not s.records for entry in self.entries for s in entry.values())


def precompute_neighbours(
    examples: Sequence[tuple[Sequence[int], Sequence[int], int, Sequence[int]]],
    db: Database,
    k: int,
    progress: bool = False,
) -> NeighbourCache:
    """Retrieves the neighbours of every chunk of a dataset once.

    Each example is excluded from its own neighbours by source id.

    Args:
        examples: ``(code_ids, intent_ids, source_id, chunks)`` tuples, where
            ``code_ids`` are the ground-truth code ids, ``intent_ids`` the
            intent in the database vocabulary and ``chunks`` the decoder
            chunks that need neighbours.
        db: The database.
        k: Neighbours per chunk.
        progress: Whether to show a progress bar.

    Returns:
        The neighbour cache, in example order.
    """
    if len(db) == 0:
        raise EmptyDatabaseError("cannot retrieve neighbours from an empty database")

    entries = []
    emptied = 0
    for code_ids, intent_ids, source_id, chunks in tqdm(
        examples, desc="neighbours", disable=not progress
    ):
        entry = {}
        for u in chunks:
            entry[u] = retrieve_chunk(db, u, code_ids, intent_ids, k, exclude_source=source_id)
            if not entry[u].records and (u > 1 or db.mode == DatabaseMode.HYBRID):
                emptied += 1
        entries.append(entry)

    if emptied:
        warnings.warn(
            f"{emptied} chunks have no neighbours once entries of their own source are "
            "excluded; the database may only hold the training data"
        )
    logger.info("retrieved neighbours for %d examples", len(entries))
    return NeighbourCache(db.chunk_size, entries)
