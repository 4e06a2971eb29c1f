"""Datasets of intent/snippet pairs.

This module reads and writes CoNaLa-shaped JSON-lines files, turns pairs into
tokenized :class:`Example` objects, and generates the synthetic corpus used
for the desk-scale experiments.

Attributes:
    synth_templates: The templates of the synthetic corpus. Each entry holds a
        code template and several paraphrased intent templates using the same
        slots.
"""
from __future__ import annotations

import logging
import re
import warnings
from collections import namedtuple
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from retroseq.normalize.lexer import LexError, code_tokens
from retroseq.normalize.normalizer import SubstitutionMap, normalize_intent, normalize_pair
from retroseq.pipeline.vocab import Vocabulary, build_vocabulary
from retroseq.util import DataError, get_source_id, load_jsonl, write_jsonl

logger = logging.getLogger(__name__)

INTENT_TOKEN_REGEX = re.compile(r"\w+|[^\w\s]")

SynthCorpus = namedtuple("SynthCorpus", ["train", "dev", "test", "pool"])


@dataclass
class Example:
    """A tokenized intent/snippet pair.

    ``intent`` and ``snippet`` hold the (possibly normalized) text the tokens
    were produced from, while ``source_id`` is always computed from the raw
    pair so normalization never merges distinct sources.
    """

    intent: str
    snippet: str
    intent_tokens: list[str]
    code_tokens: list[str]
    source_id: int
    substitutions: SubstitutionMap = field(default_factory=SubstitutionMap)


def tokenize_intent(text: str) -> list[str]:
    """Splits a natural language intent into lower-case words and symbols.

    Args:
        text: The intent.

    Returns:
        The tokens.
    """
    return INTENT_TOKEN_REGEX.findall(text.lower())


def load_pairs(filename: str | Path, require_intent: bool = True) -> list[tuple[str | None, str]]:
    """Loads intent/snippet pairs from a JSON-lines file.

    Each line holds an object with a ``snippet`` and an ``intent``. If a
    non-null ``rewritten_intent`` is present it is used instead of the intent,
    so both the curated and the mined CoNaLa files can be read directly.

    Args:
        filename: The filename.
        require_intent: Whether records without an intent are an error. If
            ``False``, such records are returned with an intent of ``None``.

    Returns:
        The ``(intent, snippet)`` pairs in file order.
    """
    pairs = []
    for line_number, record in enumerate(load_jsonl(filename), 1):
        snippet = record.get("snippet")
        if not isinstance(snippet, str):
            raise DataError(f"{filename}: record {line_number} has no snippet")

        intent = record.get("rewritten_intent") or record.get("intent")
        if intent is not None and not isinstance(intent, str):
            raise DataError(f"{filename}: record {line_number} has a non-string intent")
        if intent is None and require_intent:
            raise DataError(f"{filename}: record {line_number} has no intent")
        pairs.append((intent, snippet))

    if not pairs:
        raise DataError(f"{filename} contains no pairs")
    return pairs


def write_pairs(filename: str | Path, pairs: Iterable[tuple[str | None, str]]):
    """Writes intent/snippet pairs as JSON-lines.

    Args:
        filename: The filename.
        pairs: The ``(intent, snippet)`` pairs.
    """
    write_jsonl(filename, ({"intent": intent, "snippet": snippet} for intent, snippet in pairs))


def make_example(intent: str, snippet: str, normalize: bool = False) -> Example:
    """Tokenizes an intent/snippet pair.

    Args:
        intent: The intent.
        snippet: The code snippet.
        normalize: Whether quoted intent entities are replaced by placeholders
            in the intent and the code.

    Returns:
        The example.

    Raises:
        LexError: If the snippet cannot be tokenized.
    """
    source_id = get_source_id(intent, snippet)
    substitutions = SubstitutionMap()
    if normalize:
        intent, snippet, substitutions = normalize_pair(intent, snippet)
    return Example(
        intent=intent,
        snippet=snippet,
        intent_tokens=tokenize_intent(intent),
        code_tokens=code_tokens(snippet),
        source_id=source_id,
        substitutions=substitutions,
    )


def make_query(intent: str, normalize: bool = False) -> Example:
    """Tokenizes an intent to generate code for.

    The returned example has no code. With ``normalize``, quoted entities are
    replaced as in :func:`retroseq.normalize.normalizer.normalize_intent`, so
    the substitutions can restore them in the generated code.

    Args:
        intent: The intent.
        normalize: Whether quoted entities are replaced by placeholders.

    Returns:
        The example.
    """
    source_id = get_source_id(intent, "")
    substitutions = SubstitutionMap()
    if normalize:
        intent, substitutions = normalize_intent(intent)
    return Example(
        intent=intent,
        snippet="",
        intent_tokens=tokenize_intent(intent),
        code_tokens=[],
        source_id=source_id,
        substitutions=substitutions,
    )


def prepare_examples(
    pairs: Iterable[tuple[str | None, str]],
    normalize: bool = False,
) -> list[Example]:
    """Tokenizes pairs, skipping those that cannot be used for training.

    Snippets the lexer rejects and pairs with an empty intent or code are
    skipped and reported with a single warning.

    Args:
        pairs: The ``(intent, snippet)`` pairs.
        normalize: Whether to normalize the pairs.

    Returns:
        The examples, in input order.
    """
    examples = []
    skipped = 0
    for intent, snippet in pairs:
        if not intent:
            skipped += 1
            continue
        try:
            example = make_example(intent, snippet, normalize=normalize)
        except LexError as exc:
            logger.debug("skipping snippet %r: %s", snippet, exc)
            skipped += 1
            continue
        if not example.code_tokens or not example.intent_tokens:
            skipped += 1
            continue
        examples.append(example)

    if skipped:
        warnings.warn(f"skipped {skipped} pairs that could not be tokenized")
    if not examples:
        raise DataError("no usable pairs")
    return examples


def build_vocabularies(
    examples: Sequence[Example],
    min_count: int = 1,
    code_base: Vocabulary | None = None,
    nl_base: Vocabulary | None = None,
) -> tuple[Vocabulary, Vocabulary]:
    """Builds the code and natural language vocabularies of a dataset.

    Args:
        examples: The examples.
        min_count: Minimum number of occurrences of a token.
        code_base: Optional code vocabulary to extend, usually the vocabulary
            of the database.
        nl_base: Optional natural language vocabulary to extend.

    Returns:
        The code and natural language vocabularies.
    """
    code_vocab = build_vocabulary((e.code_tokens for e in examples), min_count, code_base)
    nl_vocab = build_vocabulary((e.intent_tokens for e in examples), min_count, nl_base)
    return code_vocab, nl_vocab


# slots: a, b, c are variable names, i a loop variable, n a number, s and t
# words. Every run of 8 code tokens from the start of a snippet holds one of
# a, b or c, so fresh snippets of the same template share no chunk.
synth_templates: list[tuple[str, list[str]]] = [
    (
        "{a} = [{i} for {i} in {b} if {i} > {n}] + {c}",
        [
            "keep the elements of `{b}` greater than {n} followed by `{c}` in `{a}`",
            "store the elements of `{b}` that are greater than {n}, then `{c}`, in `{a}`",
            "keep the items of list `{b}` greater than {n} and append list `{c}` as `{a}`",
        ],
    ),
    (
        "{b} = sorted({a}, key=lambda {i}: {c}[{i}])",
        [
            "sort `{a}` by the values of `{c}` into `{b}`",
            "sort list `{a}` using the values in `{c}` as keys and store it in `{b}`",
            "sort the list `{a}` by looking up each item in `{c}` as `{b}`",
        ],
    ),
    (
        "{a}.sort(key=lambda {i}: {b}[{i}][{n}])",
        [
            "sort `{a}` in place by element {n} of the entries of `{b}`",
            "sort list `{a}` in place by the element {n} of its entries in `{b}`",
        ],
    ),
    (
        "{a} = dict(zip({b}, {c}))",
        [
            "create dictionary `{a}` from keys `{b}` and values `{c}`",
            "create a dictionary `{a}` from the keys `{b}` and values `{c}`",
        ],
    ),
    (
        "{a} = {b}.split('{s}')[{n}] + {c}",
        [
            "split string `{b}` on '{s}' and store part {n} followed by `{c}` in `{a}`",
            "split the string `{b}` on '{s}' and append `{c}` to the part {n} as `{a}`",
        ],
    ),
    (
        "{b} = '{s}'.join(map(str, {a}))",
        [
            "join the elements of `{a}` with '{s}' into string `{b}`",
            "join all elements of list `{a}` by '{s}' into the string `{b}`",
        ],
    ),
    (
        "{a} = [{b}[{i}:{i} + {n}] for {i} in {c}]",
        [
            "take the slices of `{b}` of length {n} starting at each index of `{c}` as `{a}`",
            "get slices of size {n} of list `{b}` at the indices in `{c}` and store them in `{a}`",
        ],
    ),
    (
        "{a} = {{{i}: {b}.count({i}) for {i} in {c}}}",
        [
            "count the occurrences in `{b}` of each item of `{c}` in dictionary `{a}`",
            "count the occurrences of every item of list `{c}` in list `{b}` as dictionary `{a}`",
        ],
    ),
    (
        "{a} = os.path.join({b}, '{s}')",
        [
            "join directory `{b}` and file name '{s}' into path `{a}`",
            "join the directory `{b}` and the file name '{s}' into path `{a}`",
        ],
    ),
    (
        "{a} = json.loads(open({b}).read())",
        [
            "load the json file at path `{b}` into `{a}`",
            "read and load the json file `{b}` into `{a}`",
        ],
    ),
    (
        "{a} = re.findall('{s}', {b}.lower())",
        [
            "find all matches of '{s}' in lower case string `{b}` and store them in `{a}`",
            "find all matches of '{s}' in the lower case string `{b}` as `{a}`",
        ],
    ),
    (
        "{a} = max({b}.keys(), key={b}.get)",
        [
            "get the key of dictionary `{b}` with the maximum value as `{a}`",
            "get the key of the dictionary `{b}` with the maximum value in `{a}`",
        ],
    ),
    (
        "{a} = sum({i} * {i} for {i} in {b})",
        [
            "compute the sum of squares of the elements of `{b}` as `{a}`",
            "compute the sum of the squares of list `{b}` as `{a}`",
        ],
    ),
    (
        "{a}.append({b}[{n}] + {c}[{n}])",
        [
            "append the sum of element {n} of `{b}` and `{c}` to `{a}`",
            "append the sum of the element {n} of lists `{b}` and `{c}` to list `{a}`",
        ],
    ),
    (
        "{a} = {b}.strip().replace('{s}', {c})",
        [
            "strip string `{b}` and replace '{s}' with `{c}` in it as `{a}`",
            "strip the string `{b}` and replace '{s}' by `{c}` into `{a}`",
        ],
    ),
    (
        "{a} = list(map(int, {b}.split(',')))",
        [
            "convert the comma separated string `{b}` to a list of integers `{a}`",
            "convert comma separated string `{b}` into the list of integers `{a}`",
        ],
    ),
    (
        "{a} = np.zeros((len({b}), {n}))",
        [
            "create a numpy array `{a}` of zeros with a row per element of `{b}` and {n} columns",
            "create numpy array `{a}` of zeros with len of `{b}` rows and {n} columns",
        ],
    ),
    (
        "{a} = {b}[{b}['{s}'] > {n}][{c}]",
        [
            "select columns `{c}` of the rows of dataframe `{b}` where column '{s}' is greater than {n} as `{a}`",
            "select the columns `{c}` of dataframe `{b}` where the column '{s}' is greater than {n} as `{a}`",
        ],
    ),
    (
        "{a} = datetime.strptime({b}, '%Y-%m-%d').date() - {c}",
        [
            "parse the date string `{b}` and subtract `{c}` from it as `{a}`",
            "parse date string `{b}` in year month day format and subtract `{c}` into `{a}`",
        ],
    ),
    (
        "{a} = any({i} in {b} for {i} in {c})",
        [
            "check if any element of `{c}` is in `{b}` and store it in `{a}`",
            "check if any element of list `{c}` is in list `{b}` as `{a}`",
        ],
    ),
    (
        "{a}.update({{'{s}': {n}, '{t}': {b}}})",
        [
            "set key '{s}' of dictionary `{a}` to {n} and key '{t}' to `{b}`",
            "set the key '{s}' of the dictionary `{a}` to {n} and the key '{t}' to `{b}`",
        ],
    ),
    (
        "{a} = len([{i} for {i} in {b} if {i} == '{s}'])",
        [
            "count the elements of `{b}` equal to '{s}' as `{a}`",
            "count the elements of list `{b}` that are equal to '{s}' as `{a}`",
        ],
    ),
    (
        "{a} = Counter({b}).most_common(len({c}))",
        [
            "get as many most common elements of `{b}` as there are in `{c}` as `{a}`",
            "get the most common items of list `{b}`, as many as the length of `{c}`, as `{a}`",
        ],
    ),
    (
        "with open({c}, 'w') as {a}: {a}.write({b})",
        [
            "write string `{b}` to the file at path `{c}`",
            "write the string `{b}` to file `{c}`",
        ],
    ),
    (
        "{a} = [{i}.strip() for {i} in open({b})]",
        [
            "read the stripped lines of file `{b}` into `{a}`",
            "read all stripped lines of the file at path `{b}` into list `{a}`",
        ],
    ),
    (
        "{a} = {b}[::-1] + {c}",
        [
            "concatenate the reversed list `{b}` with `{c}` as `{a}`",
            "reverse list `{b}` and append the list `{c}` to it as `{a}`",
        ],
    ),
]

_ADJECTIVES = [
    "red", "big", "old", "new", "raw", "hot", "cold", "fast", "slow", "tall",
    "dark", "wide", "deep", "soft", "bold", "calm", "dry", "wet", "odd", "even",
    "main", "next", "last", "temp", "final", "clean", "total", "first", "local", "max",
]
_NOUNS = [
    "table", "list", "items", "data", "rows", "names", "words", "values", "keys", "nums",
    "text", "line", "frame", "queue", "stack", "array", "scores", "counts", "parts", "files",
    "users", "prices", "dates", "tokens", "points", "cells", "nodes", "pairs", "tags", "codes",
]
_LOOP_NAMES = [
    "x", "y", "z", "i", "j", "k", "n", "v", "e", "w",
    "item", "elem", "row", "word", "line", "val",
]
_WORDS = [
    "apple", "banana", "cherry", "name", "price", "date", "city", "color", "score", "id",
    "status", "title", "user", "email", "path", "log", "data", "config", "output", "input",
    "alpha", "beta", "gamma", "delta", "red", "blue", "green", "north", "south", "error",
]


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _random_name(rng: np.random.Generator, taken: set[str]) -> str:
    while True:
        name = f"{_pick(rng, _ADJECTIVES)}_{_pick(rng, _NOUNS)}{int(rng.integers(10))}"
        if name not in taken:
            taken.add(name)
            return name


def _random_slots(rng: np.random.Generator) -> dict[str, str]:
    taken = set()
    first, second = rng.choice(len(_WORDS), size=2, replace=False)
    return {
        "a": _random_name(rng, taken),
        "b": _random_name(rng, taken),
        "c": _random_name(rng, taken),
        "i": _pick(rng, _LOOP_NAMES),
        "n": str(int(rng.integers(1, 200))),
        "s": _WORDS[int(first)],
        "t": _WORDS[int(second)],
    }


def _generate(rng: np.random.Generator, count: int, seen: set[str]) -> list[tuple[int, dict]]:
    """Generates template instances whose code is not in ``seen``."""
    instances = []
    attempts = 0
    while len(instances) < count:
        attempts += 1
        if attempts > 100 * (count + 10):
            raise DataError(f"could not generate {count} distinct synthetic pairs")
        template = int(rng.integers(len(synth_templates)))
        slots = _random_slots(rng)
        code = synth_templates[template][0].format(**slots)
        if code in seen:
            continue
        seen.add(code)
        instances.append((template, slots))
    return instances


def _render(template: int, slots: dict, variant: int) -> tuple[str, str]:
    code, intents = synth_templates[template]
    return intents[variant % len(intents)].format(**slots), code.format(**slots)


def synth_corpus(
    seed: int,
    n_pairs: int,
    duplicate_rate: float = 0.0,
    pool_size: int | None = None,
) -> SynthCorpus:
    """Generates a synthetic intent/snippet corpus.

    Pairs are instances of :obj:`synth_templates` with random variable names,
    words and numbers. The pairs are split 80/10/10 into train, dev and test
    sets with no shared code. The pool, used to build databases, holds
    ``pool_size`` further fresh pairs, plus a paraphrased copy (same code,
    different intent wording) of each dataset pair with probability
    ``duplicate_rate``. The duplicate rate therefore controls how much of the
    test code can be found in a database built from the pool.

    Args:
        seed: The random seed. The corpus is fully determined by the seed and
            the other arguments.
        n_pairs: Number of pairs in the train, dev and test sets together.
        duplicate_rate: Probability, between 0 and 1, that a dataset pair is
            copied into the pool.
        pool_size: Number of fresh pairs in the pool. Defaults to ``n_pairs``.

    Returns:
        The ``train``, ``dev``, ``test`` and ``pool`` lists of
        ``(intent, snippet)`` pairs.
    """
    if n_pairs < 30:
        raise ValueError("n_pairs must be at least 30")
    if not 0 <= duplicate_rate <= 1:
        raise ValueError("duplicate_rate must be between 0 and 1")
    pool_size = n_pairs if pool_size is None else pool_size

    rng = np.random.default_rng(seed)
    seen = set()
    instances = _generate(rng, n_pairs, seen)
    variants = [int(rng.integers(len(synth_templates[t][1]))) for t, _ in instances]
    pairs = [_render(t, slots, v) for (t, slots), v in zip(instances, variants)]

    n_test = n_pairs // 10
    n_dev = n_pairs // 10
    n_train = n_pairs - n_dev - n_test
    train, dev, test = pairs[:n_train], pairs[n_train : n_train + n_dev], pairs[n_train + n_dev :]

    pool = [_render(t, slots, 0) for t, slots in _generate(rng, pool_size, seen)]
    duplicated = rng.random(n_pairs) < duplicate_rate
    for (template, slots), variant, copy in zip(instances, variants, duplicated):
        if copy:
            pool.append(_render(template, slots, variant + 1))
    pool = [pool[i] for i in rng.permutation(len(pool))]

    logger.info(
        "generated %d train, %d dev, %d test and %d pool pairs",
        len(train),
        len(dev),
        len(test),
        len(pool),
    )
    return SynthCorpus(train, dev, test, pool)
