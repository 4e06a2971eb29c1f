"""Miscellaneous utility functions and common data.

Attributes:
    PAD: The padding token. Always stored with id ``0``.
    UNK: The unknown token, id ``1``.
    BOS: The beginning-of-sequence token fed to the code decoder, id ``2``.
    EOS: The end-of-sequence token that terminates a hypothesis, id ``3``.
    special_tokens: The reserved tokens, in id order. Every vocabulary starts
        with these entries.
    placeholder_categories: The placeholder prefixes used by the normalizer,
        mapped to a short description.
"""
from __future__ import annotations

import hashlib
import json
import numbers
import os
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

from monty.io import zopen

PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3

special_tokens: tuple[str, ...] = (PAD, UNK, BOS, EOS)

placeholder_categories: dict[str, str] = {
    "var": "variable names and, in database snippets, string literals",
    "str": "string literals quoted in an intent",
    "lst": "names bound to a bracketed literal",
}

THREADS_ENV_VAR = "RETROSEQ_THREADS"


class RetroSeqError(Exception):
    """Base class for all errors raised by retroseq."""


class DataError(RetroSeqError, ValueError):
    """Raised when input data is malformed or empty."""


class ConfigError(RetroSeqError, ValueError):
    """Raised when a configuration document is invalid."""


def stable_hash64(*parts: str | bytes | int) -> int:
    """Gets a 64-bit hash that is stable across processes and platforms.

    Python's builtin :func:`hash` is salted per process, so it cannot be used
    for anything that is written to disk.

    Args:
        parts: Strings, bytes or integers to hash. Integers are encoded as
            8 byte little-endian values (two's complement when negative).

    Returns:
        The hash as an unsigned integer.
    """
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        if isinstance(part, numbers.Integral):
            part = int(part)
            part = part.to_bytes(8, "little", signed=part < 0)
        elif isinstance(part, str):
            part = part.encode("utf-8")
        digest.update(len(part).to_bytes(4, "little"))
        digest.update(part)
    return int.from_bytes(digest.digest(), "little")


def get_source_id(intent: str | None, snippet: str) -> int:
    """Gets the source id of an intent/snippet pair.

    Identical pairs share an id, while a snippet seen with a different intent
    (or with no intent at all) gets a different id.

    Args:
        intent: The natural language intent, or ``None`` for bare snippets.
        snippet: The code snippet.

    Returns:
        The 64-bit source id.
    """
    return stable_hash64(intent or "", "\x00", snippet)


def load_jsonl(filename: str | Path) -> list[dict[str, Any]]:
    """Load a JSON-lines file, which may be gzip or bz2 compressed.

    Args:
        filename: The filename.

    Returns:
        One :obj:`dict` per non-blank line.
    """
    records = []
    with zopen(filename, "rt", encoding="utf-8") as file:
        for line_number, line in enumerate(file, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(
                    f"{filename}:{line_number}: invalid JSON ({exc.msg})"
                ) from exc
            if not isinstance(record, dict):
                raise DataError(f"{filename}:{line_number}: expected a JSON object")
            records.append(record)
    return records


def write_jsonl(filename: str | Path, records: Iterable[dict[str, Any]]):
    """Write records to a JSON-lines file, one canonical JSON object per line.

    Args:
        filename: The filename.
        records: The records to write.
    """
    with zopen(filename, "wt", encoding="utf-8") as file:
        for record in records:
            file.write(json.dumps(record, sort_keys=True, ensure_ascii=False))
            file.write("\n")


def canonical_json(obj: Any) -> str:
    """Serialize an object to canonical JSON (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def get_num_threads(default: int = 1) -> int:
    """Gets the worker cap from the ``RETROSEQ_THREADS`` environment variable.

    Args:
        default: Value used when the variable is unset or invalid.

    Returns:
        The number of workers, at least 1.
    """
    try:
        return max(1, int(os.environ.get(THREADS_ENV_VAR, default)))
    except ValueError:
        return default


def batched(items: list, size: int) -> Iterator[list]:
    """Yield consecutive slices of ``items`` with at most ``size`` elements."""
    for start in range(0, len(items), size):
        yield items[start : start + size]
