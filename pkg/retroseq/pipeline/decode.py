"""Beam-search decoding with live retrieval, and test-set evaluation."""
from __future__ import annotations

import logging
import time
from collections import namedtuple
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from retroseq.model.network import LOSS_EPS, EncodingCache, RetroSeqModel
from retroseq.normalize.lexer import detokenize
from retroseq.normalize.normalizer import denormalize_tokens
from retroseq.pipeline.data import Example
from retroseq.pipeline.metrics import corpus_bleu
from retroseq.pipeline.neighbours import as_values, retrieve_chunk
from retroseq.retrieve.datastore import Database
from retroseq.tensor.engine import no_grad
from retroseq.util import BOS_ID, EOS_ID, DataError, get_num_threads

logger = logging.getLogger(__name__)

DecodeResult = namedtuple("DecodeResult", ["tokens", "ids", "score", "log_prob"])
DecodeResult.__doc__ = """The best hypothesis of a decode.

Attributes:
    tokens: The generated code tokens, without EOS.
    ids: The generated ids, including EOS when the hypothesis finished.
    score: The length-normalized log-probability used to rank hypotheses.
    log_prob: The total log-probability.
"""

EvaluationResult = namedtuple("EvaluationResult", ["bleu", "records"])


@dataclass
class Hypothesis:
    """A partial decode.

    Attributes:
        ids: Generated ids.
        log_prob: Sum of the log-probabilities of the ids.
        neighbours: The neighbour records of each chunk retrieved so far.
    """

    ids: list[int] = field(default_factory=list)
    log_prob: float = 0.0
    neighbours: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def score(self) -> float:
        return self.log_prob / max(len(self.ids), 1)

    @property
    def finished(self) -> bool:
        return bool(self.ids) and self.ids[-1] == EOS_ID


class DecodeSession:
    """Decoding state shared by all hypotheses of one intent.

    Holds the intent encoding, the encodings of neighbours seen so far and
    the results of database queries, so that hypotheses sharing a chunk do
    not query twice.

    Args:
        model: The model, in evaluation mode.
        db: The database, or ``None`` for a model without retrieval.
        intent_tokens: The intent tokens.
        k: Neighbours per chunk. Defaults to the model setting.
        exclude_source: Source id whose entries are never retrieved.
    """

    def __init__(
        self,
        model: RetroSeqModel,
        db: Database | None,
        intent_tokens: Sequence[str],
        k: int | None = None,
        exclude_source: int | None = None,
    ):
        if model.config.retrieval and db is None:
            raise ValueError("a retrieval model needs a database to decode")
        self.model = model
        self.db = db
        self.k = k or model.config.num_neighbours
        self.exclude_source = exclude_source
        self.source = model.encode_source(intent_tokens)
        self.intent_ids = db.encode_intent(self.source.tokens) if db is not None else []
        with no_grad():
            self.cache = EncodingCache(model.encode_nl(self.source.nl_ids))
        # keyed by (is intent query, query tokens)
        self._retrieved: dict[tuple[bool, tuple[int, ...]], np.ndarray] = {}
        self.queries = 0

    def neighbours(self, hypothesis: Hypothesis) -> dict[int, np.ndarray]:
        """Gets the neighbours a hypothesis needs for its next step.

        A chunk is retrieved once the hypothesis holds all the tokens that
        query it.
        """
        neighbours = hypothesis.neighbours
        m = self.model.config.chunk_size
        for u in self.model.required_chunks(len(hypothesis.ids) + 1):
            if u in neighbours:
                continue
            if u == 1:
                key = (True, ())
            else:
                key = (False, tuple(hypothesis.ids[(u - 2) * m : (u - 1) * m]))
            if key not in self._retrieved:
                found = retrieve_chunk(
                    self.db,
                    u,
                    hypothesis.ids,
                    self.intent_ids,
                    self.k,
                    exclude_source=self.exclude_source,
                )
                self._retrieved[key] = as_values(found, m)
                self.queries += 1
            neighbours = {**neighbours, u: self._retrieved[key]}
        return neighbours

    def log_probs(self, ids: Sequence[int], neighbours: dict[int, np.ndarray]) -> np.ndarray:
        """Gets the log-probabilities of the token following ``ids``."""
        inputs = [BOS_ID] + list(ids)
        with no_grad():
            probs = self.model(self.source, inputs, neighbours, cache=self.cache)
        return np.log(probs.data[-1].astype(np.float64) + LOSS_EPS)


def _greedy(session: DecodeSession, max_len: int) -> Hypothesis:
    hypothesis = Hypothesis()
    for _ in range(max_len):
        neighbours = session.neighbours(hypothesis)
        log_probs = session.log_probs(hypothesis.ids, neighbours)
        token = int(np.argmax(log_probs))
        hypothesis = Hypothesis(
            hypothesis.ids + [token], hypothesis.log_prob + float(log_probs[token]), neighbours
        )
        if hypothesis.finished:
            break
    return hypothesis


def _result(session: DecodeSession, hypothesis: Hypothesis) -> DecodeResult:
    ids = hypothesis.ids
    generated = ids[:-1] if hypothesis.finished else ids
    tokens = session.model.decode_ids(generated, session.source)
    return DecodeResult(tokens, ids, hypothesis.score, hypothesis.log_prob)


def greedy_decode(
    model: RetroSeqModel,
    db: Database | None,
    intent_tokens: Sequence[str],
    max_len: int | None = None,
    exclude_source: int | None = None,
) -> DecodeResult:
    """Decodes by always taking the most probable next token."""
    session = DecodeSession(model, db, intent_tokens, exclude_source=exclude_source)
    max_len = model.config.max_code_len if max_len is None else max_len
    return _result(session, _greedy(session, max_len))


def beam_decode(
    model: RetroSeqModel,
    db: Database | None,
    intent_tokens: Sequence[str],
    width: int | None = None,
    max_len: int | None = None,
    exclude_source: int | None = None,
) -> DecodeResult:
    """Finds a high-scoring code sequence with beam search.

    Hypotheses are ranked by log-probability divided by length, ties kept in
    the order they were produced. Each step extends every live hypothesis
    with its ``width`` best tokens and keeps the ``width`` best candidates;
    those ending with EOS are set aside as finished. Whenever a hypothesis
    completes a chunk it queries the database with it before its next step.
    The search stops when ``width`` hypotheses have finished, no hypothesis
    is live or ``max_len`` tokens were generated. The greedy decode is also a
    candidate, so the result never scores below it.

    Args:
        model: The model, in evaluation mode.
        db: The database, or ``None`` for a model without retrieval.
        intent_tokens: The intent tokens.
        width: The beam width. Defaults to the model setting.
        max_len: Maximum number of generated tokens. Defaults to the model
            setting.
        exclude_source: Source id whose entries are never retrieved.

    Returns:
        The best hypothesis.
    """
    width = model.config.beam_width if width is None else width
    if width < 1:
        raise ValueError(f"beam width must be at least 1, got {width}")
    max_len = model.config.max_code_len if max_len is None else max_len
    session = DecodeSession(model, db, intent_tokens, exclude_source=exclude_source)
    greedy = _greedy(session, max_len)
    if width == 1:
        return _result(session, greedy)

    live = [Hypothesis()]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hypothesis in live:
            neighbours = session.neighbours(hypothesis)
            log_probs = session.log_probs(hypothesis.ids, neighbours)
            for token in np.argsort(-log_probs, kind="stable")[:width]:
                candidates.append(
                    Hypothesis(
                        hypothesis.ids + [int(token)],
                        hypothesis.log_prob + float(log_probs[token]),
                        neighbours,
                    )
                )
        candidates.sort(key=lambda h: -h.score)

        live = []
        for candidate in candidates[:width]:
            (finished if candidate.finished else live).append(candidate)
        if len(finished) >= width or not live:
            break

    pool = finished + live + [greedy]
    best = max(pool, key=lambda h: h.score)
    logger.debug("beam search made %d database queries", session.queries)
    return _result(session, best)


def hypothesis_text(tokens: Sequence[str], example: Example | None = None) -> str:
    """Gets the code text of generated tokens, restoring placeholders."""
    if example is not None and len(example.substitutions):
        tokens = denormalize_tokens(tokens, example.substitutions)
    return detokenize(tokens)


def evaluate(
    model: RetroSeqModel,
    db: Database | None,
    examples: Sequence[Example],
    width: int | None = None,
    max_len: int | None = None,
    num_workers: int | None = None,
    progress: bool = False,
) -> EvaluationResult:
    """Decodes a test set and scores it with corpus BLEU.

    BLEU compares the generated tokens with the example code tokens, so it is
    computed on normalized tokens when the examples are normalized.

    Args:
        model: The model. Switched to evaluation mode.
        db: The database, or ``None`` for a model without retrieval.
        examples: The test examples.
        width: The beam width. Defaults to the model setting.
        max_len: Maximum number of generated tokens.
        num_workers: Examples decoded concurrently. Defaults to the
            ``RETROSEQ_THREADS`` environment variable.
        progress: Whether to show a progress bar.

    Returns:
        The BLEU score and one record per example, in input order.
    """
    if not examples:
        raise DataError("cannot evaluate an empty test set")
    model.eval()
    num_workers = num_workers or get_num_threads()

    def decode(example: Example) -> tuple[DecodeResult, float]:
        start = time.perf_counter()
        result = beam_decode(model, db, example.intent_tokens, width, max_len)
        return result, time.perf_counter() - start

    with ThreadPoolExecutor(max_workers=num_workers) as executor:
        outputs = list(
            tqdm(
                executor.map(decode, examples),
                total=len(examples),
                desc="decoding",
                disable=not progress,
            )
        )

    records = []
    for example, (result, seconds) in zip(examples, outputs):
        records.append(
            {
                "intent": example.intent,
                "reference": example.snippet,
                "hypothesis": hypothesis_text(result.tokens, example),
                "hypothesis_tokens": result.tokens,
                "score": result.score,
                "seconds": seconds,
            }
        )
    bleu = corpus_bleu([r.tokens for r, _ in outputs], [e.code_tokens for e in examples])
    mean_time = sum(s for _, s in outputs) / len(outputs)
    logger.info("BLEU %.2f over %d examples (%.3f s per example)", bleu, len(examples), mean_time)
    return EvaluationResult(bleu, records)
