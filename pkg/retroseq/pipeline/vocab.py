"""Append-only token vocabularies."""
from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterable, Sequence

from monty.json import MSONable

from retroseq.util import UNK_ID, RetroSeqError, special_tokens

logger = logging.getLogger(__name__)


class VocabularyMismatchError(RetroSeqError, ValueError):
    """Raised when two components were built with incompatible vocabularies."""


class Vocabulary(MSONable):
    """A mapping between tokens and integer ids.

    Ids are never reassigned: new tokens are only appended. The special tokens
    always occupy the first ids (PAD 0, UNK 1, BOS 2, EOS 3).

    Args:
        tokens: The tokens in id order. Special tokens are prepended if the
            list does not already start with them.
    """

    def __init__(self, tokens: Sequence[str] = ()):
        tokens = list(tokens)
        if tokens[: len(special_tokens)] != list(special_tokens):
            tokens = list(special_tokens) + [t for t in tokens if t not in special_tokens]
        self.tokens: list[str] = []
        self._index: dict[str, int] = {}
        for token in tokens:
            self.add(token)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self):
        return f"Vocabulary({len(self)} tokens)"

    def add(self, token: str) -> int:
        """Adds a token if it is new and returns its id."""
        token_id = self._index.get(token)
        if token_id is None:
            token_id = len(self.tokens)
            self.tokens.append(token)
            self._index[token] = token_id
        return token_id

    def get_id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str], add: bool = False) -> list[int]:
        """Converts tokens to ids.

        Args:
            tokens: The tokens.
            add: Whether unknown tokens are appended to the vocabulary. If
                ``False`` they are mapped to the UNK id.

        Returns:
            The ids.
        """
        if add:
            return [self.add(t) for t in tokens]
        return [self.get_id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def extend(self, tokens: Iterable[str]) -> Vocabulary:
        """Gets a copy of this vocabulary with extra tokens appended."""
        vocab = Vocabulary(self.tokens)
        for token in tokens:
            vocab.add(token)
        return vocab

    def check_prefix_of(self, other: Vocabulary, description: str = "vocabulary"):
        """Checks that ``other`` extends this vocabulary without reassigning ids.

        Raises:
            VocabularyMismatchError: If the first ``len(self)`` tokens of
                ``other`` differ from this vocabulary.
        """
        if other.tokens[: len(self)] != self.tokens:
            first = next(
                (i for i, (a, b) in enumerate(zip(self.tokens, other.tokens)) if a != b),
                min(len(self), len(other)),
            )
            raise VocabularyMismatchError(
                f"{description} does not extend the expected vocabulary "
                f"(first difference at id {first})"
            )

    def as_dict(self) -> dict:
        return {
            "@module": type(self).__module__,
            "@class": type(self).__name__,
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Vocabulary:
        return cls(d["tokens"])


def build_vocabulary(
    sequences: Iterable[Sequence[str]],
    min_count: int = 1,
    base: Vocabulary | None = None,
) -> Vocabulary:
    """Builds a vocabulary from token sequences.

    Tokens are appended in decreasing order of frequency, ties broken by first
    appearance.

    Args:
        sequences: The token sequences.
        min_count: Minimum number of occurrences for a token to be included.
        base: Optional vocabulary to extend.

    Returns:
        The vocabulary.
    """
    counts = Counter()
    for sequence in sequences:
        counts.update(sequence)
    vocab = Vocabulary(base.tokens if base is not None else ())
    dropped = 0
    for token, count in counts.most_common():
        if count >= min_count:
            vocab.add(token)
        else:
            dropped += 1
    if dropped:
        logger.info("%d rare tokens will be mapped to UNK", dropped)
    return vocab
