"""Evaluation metrics: corpus BLEU and database overlap."""
from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Sequence

import numpy as np
from sacrebleu.metrics import BLEU

from retroseq.retrieve.datastore import Database, KeyKind, chunk_sequence
from retroseq.util import UNK_ID, DataError

logger = logging.getLogger(__name__)

MAX_ORDER = 4


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_statistics(
    hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]
) -> tuple[list[int], list[int], int, int]:
    """Gets the clipped n-gram matches and counts of a corpus.

    Args:
        hypotheses: The tokenized hypotheses.
        references: One tokenized reference per hypothesis.

    Returns:
        The matched and total n-gram counts for orders 1 to 4, the hypothesis
        length and the reference length.
    """
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    sys_len = ref_len = 0
    for hypothesis, reference in zip(hypotheses, references):
        sys_len += len(hypothesis)
        ref_len += len(reference)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hypothesis, n)
            ref_counts = _ngrams(reference, n)
            correct[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            total[n - 1] += max(len(hypothesis) - n + 1, 0)
    return correct, total, sys_len, ref_len


def corpus_bleu(
    hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]
) -> float:
    """Computes corpus-level 4-gram BLEU with a brevity penalty.

    The precision of an order ``n >= 2`` with no match is smoothed by adding
    one to its numerator and denominator. Unigram precision is never
    smoothed. An order longer than every hypothesis has no n-grams at all and
    is smoothed to a precision of one, so a short hypothesis equal to its
    reference still scores 100.

    Args:
        hypotheses: The tokenized hypotheses.
        references: One tokenized reference per hypothesis.

    Returns:
        The score, between 0 and 100.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"got {len(hypotheses)} hypotheses but {len(references)} references"
        )
    correct, total, sys_len, ref_len = ngram_statistics(hypotheses, references)
    if sys_len == 0 or correct[0] == 0:
        return 0.0

    for n in range(1, MAX_ORDER):
        if correct[n] == 0:
            correct[n] += 1
            total[n] += 1
    return float(BLEU.compute_bleu(correct, total, sys_len, ref_len, smooth_method="none").score)


def r_overlap(db: Database, snippets: Sequence[Sequence[str]]) -> float:
    """Gets the fraction of test chunks stored verbatim in a database.

    Each snippet is split into chunks of the database chunk size (the last
    one padded) and a chunk counts when it equals the ``N`` of some
    code-keyed entry. Chunks holding tokens unknown to the database never
    count.

    Args:
        db: The database.
        snippets: The tokenized test snippets.

    Returns:
        The overlap ratio, between 0 and 1.
    """
    stored = {
        row.tobytes()
        for row in db.neighbours[db.key_kinds == KeyKind.CODE].astype(np.uint32)
    }
    matched = chunks = 0
    for tokens in snippets:
        if not tokens:
            continue
        for neighbour, _ in chunk_sequence(db.encode_code(tokens), db.chunk_size):
            chunks += 1
            if UNK_ID in neighbour:
                continue
            matched += np.asarray(neighbour, dtype=np.uint32).tobytes() in stored
    if chunks == 0:
        raise DataError("cannot compute the overlap of an empty test set")
    logger.info("%d of %d test chunks found in the database", matched, chunks)
    return matched / chunks
