"""The key-value database of code chunks queried during decoding.

Every entry pairs a chunk ``N`` of ``m`` code tokens and its continuation
``F`` (the next ``m`` tokens, padded) with a frozen key embedding. Classic
databases only hold entries keyed by the embedding of ``N``; hybrid databases
additionally hold, for every intent/snippet pair, an entry keyed by the
embedding of the intent whose value is the beginning of the snippet.

Databases are saved in a little-endian binary format::

    magic "RSDB" | version u32 | mode u8 | m u32 | d_e u32
    | embedder id length u16 | embedder id (UTF-8) | entry count u64
    | entries (key kind u8, source id u64, N m*u32, F m*u32, key d_e*f32)
    | CRC32 u32 of all preceding bytes

The vocabularies used to encode the tokens are stored next to the database,
in ``<path>.vocab.json``.
"""
from __future__ import annotations

import logging
import struct
import warnings
import zlib
from collections import namedtuple
from collections.abc import Iterable, Sequence
from enum import IntEnum
from pathlib import Path

import numpy as np
from monty.serialization import dumpfn, loadfn

from retroseq.normalize.lexer import LexError, code_tokens
from retroseq.normalize.normalizer import normalize_pair, normalize_snippet
from retroseq.pipeline.data import tokenize_intent
from retroseq.pipeline.vocab import Vocabulary
from retroseq.retrieve.embedder import FrozenEmbedder, PrecomputedEmbedder, get_embedder
from retroseq.retrieve.index import DEFAULT_N_PROBE, build_index
from retroseq.util import PAD_ID, UNK_ID, DataError, RetroSeqError, get_source_id

logger = logging.getLogger(__name__)

MAGIC = b"RSDB"
VERSION = 1

_HEADER = struct.Struct("<4sIBII")
_ID_LENGTH = struct.Struct("<H")
_COUNT = struct.Struct("<Q")
_CRC = struct.Struct("<I")

Embedder = FrozenEmbedder | PrecomputedEmbedder


class KeyKind(IntEnum):
    """What the key of an entry was computed from."""

    CODE = 0
    INTENT = 1


class DatabaseMode(IntEnum):
    CLASSIC = 0
    HYBRID = 1


class EmptyDatabaseError(RetroSeqError, ValueError):
    """Raised when querying a database with no entries."""


class DatastoreFormatError(RetroSeqError, ValueError):
    """Raised when a database file is corrupt or has an unknown format."""


ChunkRecord = namedtuple(
    "ChunkRecord", ["key", "neighbour", "continuation", "source_id", "key_kind"]
)


class NeighbourSet(namedtuple("NeighbourSet", ["query", "records", "distances"])):
    """The entries retrieved for one query, nearest first.

    Attributes:
        query: The query chunk tokens, or ``None`` if the query was not a
            code chunk.
        records: The retrieved :obj:`ChunkRecord` entries.
        distances: Their L2 distances to the query.
    """

    __slots__ = ()

    @property
    def values(self) -> np.ndarray:
        """The ``[N, F]`` token ids of each record, shape ``(k, 2m)``."""
        if not self.records:
            return np.zeros((0, 0), dtype=np.int64)
        return np.stack(
            [np.concatenate([r.neighbour, r.continuation]).astype(np.int64) for r in self.records]
        )


def empty_neighbours(query: Sequence[int] | None = None) -> NeighbourSet:
    return NeighbourSet(query, [], np.zeros(0))


def chunk_sequence(tokens: Sequence[int], chunk_size: int) -> list[tuple[list[int], list[int]]]:
    """Splits a token sequence into ``[N, F]`` chunk pairs.

    Args:
        tokens: The token ids.
        chunk_size: The chunk size ``m``.

    Returns:
        One ``(N, F)`` pair per window of ``m`` tokens, where ``F`` holds the
        next ``m`` tokens. Both are padded with the PAD id to length ``m``.
    """
    if chunk_size < 1:
        raise ValueError("chunk size must be at least 1")
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise DataError("cannot chunk an empty sequence")

    def window(start: int) -> list[int]:
        chunk = tokens[start : start + chunk_size]
        return chunk + [PAD_ID] * (chunk_size - len(chunk))

    return [
        (window(start), window(start + chunk_size))
        for start in range(0, len(tokens), chunk_size)
    ]


def _as_pair(item: str | tuple[str | None, str]) -> tuple[str | None, str]:
    return (None, item) if isinstance(item, str) else tuple(item)


class Database:
    """A chunk database with a nearest-neighbour index over its keys.

    Entries are only ever appended, and the keys of existing entries never
    change. The index is built on the first query after entries were added.

    Args:
        chunk_size: The chunk size ``m``.
        mode: Classic or hybrid.
        embedder: The frozen embedder computing the keys.
        code_vocab: The vocabulary of the code token ids.
        nl_vocab: The vocabulary of the intent token ids.
        index_backend: ``"exact"``, ``"ivf"`` or ``"auto"``.
        n_probe: Lists scanned per query by the inverted-file backend.
        seed: Seed of the inverted-file k-means.
    """

    def __init__(
        self,
        chunk_size: int,
        mode: DatabaseMode = DatabaseMode.CLASSIC,
        embedder: Embedder | None = None,
        code_vocab: Vocabulary | None = None,
        nl_vocab: Vocabulary | None = None,
        index_backend: str = "auto",
        n_probe: int = DEFAULT_N_PROBE,
        seed: int = 0,
    ):
        if chunk_size < 1:
            raise ValueError("chunk size must be at least 1")
        self.chunk_size = chunk_size
        self.mode = DatabaseMode(mode)
        self.embedder = embedder if embedder is not None else FrozenEmbedder()
        self.code_vocab = code_vocab if code_vocab is not None else Vocabulary()
        self.nl_vocab = nl_vocab if nl_vocab is not None else Vocabulary()
        self.index_backend = index_backend
        self.n_probe = n_probe
        self.seed = seed
        self.skipped = 0

        m, dim = chunk_size, self.embedder.dim
        self.keys = np.zeros((0, dim), dtype=np.float32)
        self.neighbours = np.zeros((0, m), dtype=np.uint32)
        self.continuations = np.zeros((0, m), dtype=np.uint32)
        self.source_ids = np.zeros(0, dtype=np.uint64)
        self.key_kinds = np.zeros(0, dtype=np.uint8)
        self._indexes = {}

    @property
    def embedder_id(self) -> str:
        return self.embedder.embedder_id

    @property
    def dim(self) -> int:
        return self.embedder.dim

    def __len__(self):
        return len(self.keys)

    def __getitem__(self, ordinal: int) -> ChunkRecord:
        return ChunkRecord(
            self.keys[ordinal],
            self.neighbours[ordinal],
            self.continuations[ordinal],
            int(self.source_ids[ordinal]),
            KeyKind(int(self.key_kinds[ordinal])),
        )

    def __eq__(self, other):
        return (
            isinstance(other, Database)
            and self.mode == other.mode
            and self.chunk_size == other.chunk_size
            and self.embedder_id == other.embedder_id
            and self.keys.tobytes() == other.keys.tobytes()
            and np.array_equal(self.neighbours, other.neighbours)
            and np.array_equal(self.continuations, other.continuations)
            and np.array_equal(self.source_ids, other.source_ids)
            and np.array_equal(self.key_kinds, other.key_kinds)
        )

    def __repr__(self):
        return (
            f"Database({self.mode.name.lower()}, m={self.chunk_size}, "
            f"{len(self)} entries, embedder={self.embedder_id!r})"
        )

    def count(self, key_kind: KeyKind) -> int:
        """Gets the number of entries with a key kind."""
        return int(np.count_nonzero(self.key_kinds == key_kind))

    def add_entries(
        self,
        neighbours: np.ndarray,
        continuations: np.ndarray,
        keys: np.ndarray,
        source_ids: Sequence[int],
        key_kind: KeyKind,
    ):
        """Appends raw entries.

        Args:
            neighbours: The ``N`` chunks, shape ``(n, m)``.
            continuations: The ``F`` chunks, shape ``(n, m)``.
            keys: The keys, shape ``(n, d_e)``.
            source_ids: The source id of each entry.
            key_kind: The kind of all the keys.
        """
        n = len(keys)
        m = self.chunk_size
        neighbours = np.asarray(neighbours, dtype=np.uint32).reshape(n, m)
        continuations = np.asarray(continuations, dtype=np.uint32).reshape(n, m)
        keys = np.asarray(keys, dtype=np.float32).reshape(n, self.dim)

        self.keys = np.concatenate([self.keys, keys])
        self.neighbours = np.concatenate([self.neighbours, neighbours])
        self.continuations = np.concatenate([self.continuations, continuations])
        self.source_ids = np.concatenate(
            [self.source_ids, np.asarray(source_ids, dtype=np.uint64).reshape(n)]
        )
        self.key_kinds = np.concatenate([self.key_kinds, np.full(n, key_kind, dtype=np.uint8)])
        self._indexes = {}

    def encode_code(self, tokens: Sequence[str], add: bool = False) -> list[int]:
        return self.code_vocab.encode(tokens, add=add)

    def encode_intent(self, tokens: Sequence[str], add: bool = False) -> list[int]:
        return self.nl_vocab.encode(tokens, add=add)

    def embed_code_ids(self, ids: Sequence[int]) -> np.ndarray:
        """Embeds code token ids, mapping ids unknown to the database to UNK.

        Model vocabularies extend the database vocabulary, so model ids can be
        passed directly.
        """
        limit = len(self.code_vocab)
        return self.embedder.embed_code([i if i < limit else UNK_ID for i in ids])

    def embed_intent_ids(self, ids: Sequence[int]) -> np.ndarray:
        """Embeds intent token ids, mapping ids unknown to the database to UNK."""
        limit = len(self.nl_vocab)
        return self.embedder.embed_intent([i if i < limit else UNK_ID for i in ids])

    def add_snippet(self, code_ids: Sequence[int], source_id: int) -> int:
        """Adds the code-keyed entries of a snippet.

        Args:
            code_ids: The code token ids.
            source_id: The source id of the snippet.

        Returns:
            The number of entries added.
        """
        chunks = chunk_sequence(code_ids, self.chunk_size)
        neighbours = np.array([n for n, _ in chunks])
        continuations = np.array([f for _, f in chunks])
        keys = np.stack([self.embedder.embed_code(n) for n in neighbours])
        self.add_entries(neighbours, continuations, keys, [source_id] * len(chunks), KeyKind.CODE)
        return len(chunks)

    def add_intent(self, intent_ids: Sequence[int], code_ids: Sequence[int], source_id: int):
        """Adds an entry keyed by an intent, valued by the start of its code.

        Args:
            intent_ids: The intent token ids.
            code_ids: The code token ids.
            source_id: The source id of the pair.
        """
        neighbour, continuation = chunk_sequence(code_ids, self.chunk_size)[0]
        key = self.embedder.embed_intent(intent_ids)
        self.add_entries([neighbour], [continuation], key[None], [source_id], KeyKind.INTENT)

    def extend(
        self,
        corpus: Iterable[str | tuple[str | None, str]],
        normalize: bool = False,
        grow_vocab: bool = False,
    ) -> int:
        """Appends snippets, and intent-keyed entries in hybrid mode.

        Existing keys and ids are never modified. By default tokens unknown to
        the database vocabulary are stored as UNK, so that a model trained
        with the database keeps a consistent vocabulary.

        Args:
            corpus: Snippets, or ``(intent, snippet)`` pairs. Bare snippets
                and pairs without an intent only get code-keyed entries.
            normalize: Whether snippets are normalized before chunking.
            grow_vocab: Whether unknown tokens are added to the vocabularies.

        Returns:
            The number of entries added.
        """
        before = len(self)
        count = 0
        skipped = 0
        for intent, snippet in map(_as_pair, corpus):
            count += 1
            source_id = get_source_id(intent, snippet)
            try:
                tokens = code_tokens(normalize_snippet(snippet).code if normalize else snippet)
            except LexError as exc:
                logger.debug("skipping snippet %r: %s", snippet, exc)
                skipped += 1
                continue
            if not tokens:
                skipped += 1
                continue

            code_ids = self.encode_code(tokens, add=grow_vocab)
            self.add_snippet(code_ids, source_id)
            if self.mode == DatabaseMode.HYBRID and intent:
                intent_ids = self.encode_intent(_intent_tokens(intent, snippet, normalize), add=grow_vocab)
                if intent_ids:
                    self.add_intent(intent_ids, code_ids, source_id)

        self.skipped += skipped
        if skipped:
            warnings.warn(f"skipped {skipped} of {count} snippets that could not be tokenized")
        logger.info(
            "added %d entries from %d snippets (%d skipped)", len(self) - before, count, skipped
        )
        return len(self) - before

    def _get_index(self, key_kind: KeyKind | None):
        cached = self._indexes.get(key_kind)
        if cached is None:
            if key_kind is None:
                ordinals = np.arange(len(self))
            else:
                ordinals = np.flatnonzero(self.key_kinds == key_kind)
            index = build_index(
                self.keys[ordinals], self.index_backend, n_probe=self.n_probe, seed=self.seed
            )
            cached = (index, ordinals)
            self._indexes[key_kind] = cached
            logger.debug("built %s index over %d keys", index.backend, len(ordinals))
        return cached

    def query_k(
        self,
        query: np.ndarray,
        k: int,
        exclude_source: int | None = None,
        key_kind: KeyKind | None = None,
        query_tokens: Sequence[int] | None = None,
    ) -> NeighbourSet:
        """Gets the entries whose keys are nearest to a query vector.

        Ties in distance are broken by lower source id, then lower ordinal.

        Args:
            query: The query vector.
            k: The number of neighbours.
            exclude_source: Entries with this source id are never returned.
            key_kind: Only return entries with this key kind.
            query_tokens: The query chunk, recorded in the result.

        Returns:
            Up to ``k`` records, nearest first.
        """
        if len(self) == 0:
            raise EmptyDatabaseError("cannot query an empty database")
        if k < 1:
            raise ValueError("k must be at least 1")
        query = np.asarray(query, dtype=np.float32)
        if query.shape != (self.dim,):
            raise ValueError(f"query has shape {query.shape}, expected ({self.dim},)")

        index, ordinals = self._get_index(key_kind)
        if len(ordinals) == 0:
            return empty_neighbours(query_tokens)
        source_ids = self.source_ids[ordinals]
        allowed = None
        if exclude_source is not None:
            allowed = source_ids != np.uint64(exclude_source)

        local, distances = index.search(query, k, source_ids, allowed)
        records = [self[int(ordinals[i])] for i in local]
        return NeighbourSet(query_tokens, records, distances)

    def header(self) -> dict:
        """Gets a summary of the database."""
        return {
            "mode": self.mode.name.lower(),
            "chunk_size": self.chunk_size,
            "dim": self.dim,
            "embedder_id": self.embedder_id,
            "entries": len(self),
            "code_entries": self.count(KeyKind.CODE),
            "intent_entries": self.count(KeyKind.INTENT),
            "code_vocab_size": len(self.code_vocab),
            "nl_vocab_size": len(self.nl_vocab),
        }


def _intent_tokens(intent: str, snippet: str, normalize: bool) -> list[str]:
    if normalize:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            intent = normalize_pair(intent, snippet).intent
    return tokenize_intent(intent)


def query_k(
    db: Database,
    query: np.ndarray,
    k: int,
    exclude_source: int | None = None,
    key_kind: KeyKind | None = None,
) -> NeighbourSet:
    """Gets the ``k`` entries of a database nearest to a query vector.

    See :meth:`Database.query_k`.
    """
    return db.query_k(query, k, exclude_source=exclude_source, key_kind=key_kind)


def build_classic(
    corpus: Iterable[str | tuple[str | None, str]],
    chunk_size: int,
    normalize: bool = False,
    embedder: Embedder | None = None,
    code_vocab: Vocabulary | None = None,
    index_backend: str = "auto",
    seed: int = 0,
) -> Database:
    """Builds a database keyed by code chunks.

    Args:
        corpus: Snippets, or ``(intent, snippet)`` pairs. Intents only
            contribute to the source ids.
        chunk_size: The chunk size ``m``.
        normalize: Whether snippets are normalized with
            :func:`retroseq.normalize.normalizer.normalize_snippet`.
        embedder: The key embedder. Defaults to :obj:`FrozenEmbedder`.
        code_vocab: Vocabulary to extend with the code tokens.
        index_backend: The index backend.
        seed: Seed of the inverted-file k-means.

    Returns:
        The database.
    """
    db = Database(
        chunk_size,
        DatabaseMode.CLASSIC,
        embedder=embedder,
        code_vocab=Vocabulary(code_vocab.tokens) if code_vocab else None,
        index_backend=index_backend,
        seed=seed,
    )
    db.extend(corpus, normalize=normalize, grow_vocab=True)
    return db


def build_hybrid(
    pairs: Iterable[tuple[str | None, str]],
    chunk_size: int,
    normalize: bool = False,
    embedder: Embedder | None = None,
    code_vocab: Vocabulary | None = None,
    nl_vocab: Vocabulary | None = None,
    index_backend: str = "auto",
    seed: int = 0,
) -> Database:
    """Builds a database with code-keyed and intent-keyed entries.

    Every snippet is chunked as in :func:`build_classic`. In addition, each
    pair gets one entry keyed by the embedding of its intent, whose value is
    the first two chunks of the code.

    Args:
        pairs: The ``(intent, snippet)`` pairs.
        chunk_size: The chunk size ``m``.
        normalize: Whether pairs are normalized.
        embedder: The key embedder. Defaults to :obj:`FrozenEmbedder`.
        code_vocab: Vocabulary to extend with the code tokens.
        nl_vocab: Vocabulary to extend with the intent tokens.
        index_backend: The index backend.
        seed: Seed of the inverted-file k-means.

    Returns:
        The database.
    """
    db = Database(
        chunk_size,
        DatabaseMode.HYBRID,
        embedder=embedder,
        code_vocab=Vocabulary(code_vocab.tokens) if code_vocab else None,
        nl_vocab=Vocabulary(nl_vocab.tokens) if nl_vocab else None,
        index_backend=index_backend,
        seed=seed,
    )
    db.extend(pairs, normalize=normalize, grow_vocab=True)
    return db


def get_vocab_path(filename: str | Path) -> Path:
    """Gets the path of the vocabulary file stored next to a database."""
    return Path(f"{filename}.vocab.json")


def to_bytes(db: Database) -> bytes:
    """Serializes a database to the binary format."""
    embedder_id = db.embedder_id.encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, VERSION, int(db.mode), db.chunk_size, db.dim),
        _ID_LENGTH.pack(len(embedder_id)),
        embedder_id,
        _COUNT.pack(len(db)),
    ]

    records = np.empty(len(db), dtype=_record_dtype(db.chunk_size, db.dim))
    records["kind"] = db.key_kinds
    records["source"] = db.source_ids
    records["neighbour"] = db.neighbours
    records["continuation"] = db.continuations
    records["key"] = db.keys
    parts.append(records.tobytes())

    data = b"".join(parts)
    return data + _CRC.pack(zlib.crc32(data))


def from_bytes(data: bytes, index_backend: str = "auto", seed: int = 0) -> Database:
    """Deserializes a database from the binary format.

    The index is not stored: it is rebuilt with ``index_backend`` and
    ``seed`` on the first query.

    Raises:
        DatastoreFormatError: If the data is not a valid database.
    """
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise DatastoreFormatError(
            f"not a retroseq database: expected magic {MAGIC!r}, found {data[:4]!r}"
        )
    magic, version, mode, chunk_size, dim = _HEADER.unpack_from(data)
    if version != VERSION:
        raise DatastoreFormatError(f"unsupported database version {version}, expected {VERSION}")
    if mode not in (DatabaseMode.CLASSIC, DatabaseMode.HYBRID):
        raise DatastoreFormatError(f"unknown database mode {mode}")

    offset = _HEADER.size
    if len(data) < offset + _ID_LENGTH.size:
        raise DatastoreFormatError("truncated database header")
    (id_length,) = _ID_LENGTH.unpack_from(data, offset)
    offset += _ID_LENGTH.size
    if len(data) < offset + id_length + _COUNT.size:
        raise DatastoreFormatError("truncated database header")
    embedder_id = data[offset : offset + id_length].decode("utf-8")
    offset += id_length
    (count,) = _COUNT.unpack_from(data, offset)
    offset += _COUNT.size

    dtype = _record_dtype(chunk_size, dim)
    expected = offset + count * dtype.itemsize + _CRC.size
    if len(data) < expected:
        raise DatastoreFormatError(
            f"truncated database: expected {expected} bytes, found {len(data)}"
        )
    if len(data) > expected:
        raise DatastoreFormatError(f"{len(data) - expected} unexpected bytes after the database")
    (crc,) = _CRC.unpack_from(data, expected - _CRC.size)
    if crc != zlib.crc32(data[: expected - _CRC.size]):
        raise DatastoreFormatError("database checksum mismatch")

    records = np.zeros(0, dtype=dtype)
    if count:
        records = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    db = Database(
        chunk_size,
        DatabaseMode(mode),
        embedder=get_embedder(embedder_id, dim=dim),
        index_backend=index_backend,
        seed=seed,
    )
    if db.dim != dim:
        raise DatastoreFormatError(f"embedder {embedder_id} has dimension {db.dim}, expected {dim}")
    db.keys = records["key"].astype(np.float32)
    db.neighbours = records["neighbour"].astype(np.uint32).reshape(count, chunk_size)
    db.continuations = records["continuation"].astype(np.uint32).reshape(count, chunk_size)
    db.source_ids = records["source"].astype(np.uint64)
    db.key_kinds = records["kind"].astype(np.uint8)
    return db


def _record_dtype(chunk_size: int, dim: int) -> np.dtype:
    return np.dtype(
        [
            ("kind", "u1"),
            ("source", "<u8"),
            ("neighbour", "<u4", (chunk_size,)),
            ("continuation", "<u4", (chunk_size,)),
            ("key", "<f4", (dim,)),
        ]
    )


def save(db: Database, filename: str | Path):
    """Saves a database and its vocabularies.

    Args:
        db: The database.
        filename: The database file. The vocabularies are written to
            ``<filename>.vocab.json``.
    """
    Path(filename).write_bytes(to_bytes(db))
    dumpfn({"code": db.code_vocab, "nl": db.nl_vocab}, get_vocab_path(filename))
    logger.info("saved %d entries to %s", len(db), filename)


def load(filename: str | Path, index_backend: str = "auto", seed: int = 0) -> Database:
    """Loads a database and, if present, its vocabularies.

    Args:
        filename: The database file.
        index_backend: The index backend used for queries.
        seed: Seed of the inverted-file k-means.

    Returns:
        The database.
    """
    db = from_bytes(Path(filename).read_bytes(), index_backend=index_backend, seed=seed)
    vocab_path = get_vocab_path(filename)
    if vocab_path.exists():
        vocabs = loadfn(vocab_path)
        db.code_vocab = vocabs["code"]
        db.nl_vocab = vocabs["nl"]
    else:
        warnings.warn(f"{vocab_path} not found, the database has no vocabulary")
    return db
