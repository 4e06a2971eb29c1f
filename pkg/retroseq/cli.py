"""This module contains the ``retroseq`` command line interface.

Every stage of the pipeline is a subcommand: ``synth``, ``normalize``,
``build-db``, ``train``, ``generate``, ``evaluate``, ``overlap`` and
``inspect-db``. All randomness comes from the ``--seed`` flag, so identical
inputs give identical outputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field, fields
from pathlib import Path

import inflect
from monty.json import MSONable
from monty.serialization import dumpfn, loadfn
from ruamel.yaml.error import YAMLError

from retroseq._version import __version__
from retroseq.model.checkpoint import CheckpointFormatError, load_model
from retroseq.model.config import ModelConfig, aggregation_kinds
from retroseq.model.network import RetroSeqModel
from retroseq.normalize.lexer import LexError, code_tokens
from retroseq.normalize.normalizer import normalize_pair, normalize_snippet
from retroseq.pipeline.data import (
    load_pairs,
    make_query,
    prepare_examples,
    synth_corpus,
    write_pairs,
)
from retroseq.pipeline.decode import beam_decode, evaluate, hypothesis_text
from retroseq.pipeline.metrics import r_overlap
from retroseq.pipeline.train import TrainConfig, check_vocabularies, train
from retroseq.pipeline.vocab import VocabularyMismatchError
from retroseq.retrieve.datastore import (
    Database,
    DatabaseMode,
    DatastoreFormatError,
    EmptyDatabaseError,
    build_classic,
    build_hybrid,
    load,
    save,
)
from retroseq.util import ConfigError, DataError, get_num_threads, write_jsonl

logger = logging.getLogger(__name__)

en = inflect.engine()

RUN_CONFIG_NAME = "run_config.json"

DATA_ERRORS = (
    DataError,
    LexError,
    DatastoreFormatError,
    CheckpointFormatError,
    EmptyDatabaseError,
    VocabularyMismatchError,
    FileNotFoundError,
)


class UsageError(Exception):
    """Raised when the command line cannot be parsed."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunConfig(MSONable):
    """The fully resolved settings of a ``train`` run.

    Args:
        train_file: The training pairs (JSON-lines).
        dev_file: The dev pairs, decoded after each epoch.
        out_dir: Directory receiving the checkpoint, the metrics and this
            config.
        training: The training settings, including the model settings and
            the database path.
    """

    train_file: str | None = None
    dev_file: str | None = None
    out_dir: str = "run"
    training: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_settings(cls, settings: dict) -> RunConfig:
        """Creates a config from a plain dictionary, rejecting unknown keys."""
        settings = _check_keys(settings, cls, "run settings")
        training = settings.get("training", {})
        if not isinstance(training, TrainConfig):
            if not isinstance(training, dict):
                raise ConfigError("training settings must be a mapping")
            training = TrainConfig(**_check_keys(training, TrainConfig, "training settings"))
        return cls(**dict(settings, training=training))

    @classmethod
    def from_file(cls, filename: str | Path) -> RunConfig:
        """Loads a config from a JSON or YAML file.

        Serialization markers such as ``@class`` are ignored, so files
        written with ``dumpfn`` are checked like hand-written ones.

        Args:
            filename: The filename. The format is chosen from the extension.

        Returns:
            The config.
        """
        name = Path(filename).name.lower()
        # JSON is decoded to plain dicts
        kwargs = {} if ".yaml" in name or ".yml" in name else {"cls": json.JSONDecoder}
        try:
            settings = loadfn(filename, **kwargs)
        except (ValueError, YAMLError) as exc:
            raise ConfigError(f"could not read {filename}: {exc}") from exc
        if not isinstance(settings, dict):
            raise ConfigError(f"{filename} does not hold a mapping of settings")
        return cls.from_settings(settings)


def _check_keys(settings: dict, config_class: type, what: str) -> dict:
    known = {f.name for f in fields(config_class)}
    settings = {k: v for k, v in settings.items() if not k.startswith("@")}
    unknown = sorted(k for k in settings if k not in known)
    if unknown:
        raise ConfigError(f"unknown {what}: {', '.join(unknown)}")
    return settings


def _get_seed(args: argparse.Namespace) -> int:
    return args.seed if args.seed is not None else 0


def _count(number: int, noun: str) -> str:
    return f"{number:,} {en.plural(noun, number)}"


def _parse_setting(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"model setting {text!r} is not of the form KEY=VALUE")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def get_run_config(args: argparse.Namespace) -> RunConfig:
    """Resolves the settings of a ``train`` run from a config file and flags.

    Flags take precedence over the config file, which takes precedence over
    the defaults.

    Args:
        args: The parsed command line.

    Returns:
        The run config.
    """
    config = RunConfig.from_file(args.config) if args.config else RunConfig()

    training = {f.name: getattr(config.training, f.name) for f in fields(TrainConfig)}
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "database": args.db,
        "normalize": args.normalize,
        "min_count": args.min_count,
        "dev_beam_width": args.dev_beam,
        "dev_max_len": args.dev_max_len,
    }
    training.update({k: v for k, v in overrides.items() if v is not None})

    model = dict(training["model"])
    model_overrides = {
        "d_model": args.d_model,
        "num_neighbours": args.num_neighbours,
        "aggregation_period": args.aggregation_period,
        "aggregation": args.aggregation,
        "dropout": args.dropout,
        "retrieval": args.retrieval,
    }
    model.update({k: v for k, v in model_overrides.items() if v is not None})
    model.update(_parse_setting(setting) for setting in args.set or [])
    training["model"] = model

    return RunConfig(
        train_file=args.train or config.train_file,
        dev_file=args.dev or config.dev_file,
        out_dir=args.out or config.out_dir,
        training=TrainConfig(**training),
    )


def load_model_and_database(
    model_file: str | Path,
    db_file: str | Path | None,
    index_backend: str = "auto",
    seed: int = 0,
) -> tuple[RetroSeqModel, Database | None]:
    """Loads a checkpoint and the database it was trained with.

    Args:
        model_file: The checkpoint.
        db_file: The database file, or ``None``.
        index_backend: The index backend used for queries.
        seed: Seed of the inverted-file k-means.

    Raises:
        ConfigError: If the model needs a database and none is given, or the
            database has another chunk size or mode.
        VocabularyMismatchError: If the model vocabularies do not extend the
            database vocabularies.
    """
    model = load_model(model_file)
    config = model.config
    if not config.retrieval:
        if db_file is not None:
            warnings.warn("the model does not use retrieval, ignoring the database")
        return model, None
    if db_file is None:
        raise ConfigError("the model uses retrieval, give its database with --db")

    db = load(db_file, index_backend=index_backend, seed=seed)
    if db.chunk_size != config.chunk_size:
        raise ConfigError(
            f"database chunk size {db.chunk_size} differs from the model chunk size "
            f"{config.chunk_size}"
        )
    mode = "hybrid" if db.mode == DatabaseMode.HYBRID else "identity"
    if mode != config.first_chunk_mode:
        raise ConfigError(
            f"a {db.mode.name.lower()} database cannot be used with a model trained "
            f"for first-chunk mode {config.first_chunk_mode}"
        )
    check_vocabularies(config, db)
    return model, db


def _synth(args: argparse.Namespace):
    corpus = synth_corpus(
        _get_seed(args), args.pairs, duplicate_rate=args.duplicate_rate, pool_size=args.pool_size
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in corpus._fields:
        write_pairs(out_dir / f"{name}.jsonl", getattr(corpus, name))
    counts = ", ".join(f"{len(getattr(corpus, name)):,} {name}" for name in corpus._fields)
    print(f"wrote {counts} pairs to {out_dir}")


def _normalize(args: argparse.Namespace):
    records = []
    skipped = 0
    for intent, snippet in load_pairs(args.input, require_intent=False):
        try:
            if intent:
                intent, snippet, substitutions = normalize_pair(intent, snippet)
            else:
                snippet, substitutions = normalize_snippet(snippet)
        except LexError as exc:
            logger.debug("skipping snippet %r: %s", snippet, exc)
            skipped += 1
            continue
        records.append(
            {"intent": intent, "snippet": snippet, "substitutions": substitutions.as_dict()}
        )
    if skipped:
        warnings.warn(f"skipped {_count(skipped, 'snippet')} that could not be tokenized")
    if not records:
        raise DataError(f"{args.input} holds no snippet that could be normalized")
    write_jsonl(args.out, records)
    print(f"normalized {_count(len(records), 'pair')} into {args.out}")


def _build_db(args: argparse.Namespace):
    pairs = [pair for filename in args.input for pair in load_pairs(filename, require_intent=False)]
    if args.append_to:
        db = load(args.append_to, index_backend=args.index, seed=_get_seed(args))
        mode = db.mode.name.lower()
        if args.chunk_size is not None and args.chunk_size != db.chunk_size:
            raise ConfigError(
                f"chunk size {args.chunk_size} differs from the chunk size {db.chunk_size} "
                f"of {args.append_to}"
            )
        if args.mode is not None and args.mode != mode:
            raise ConfigError(
                f"cannot append to the {mode} database {args.append_to} in {args.mode} mode"
            )
        added = db.extend(pairs, normalize=args.normalize, grow_vocab=args.grow_vocab)
    else:
        chunk_size = args.chunk_size or ModelConfig.chunk_size
        build = build_hybrid if args.mode == "hybrid" else build_classic
        db = build(
            pairs,
            chunk_size,
            normalize=args.normalize,
            index_backend=args.index,
            seed=_get_seed(args),
        )
        added = len(db)

    if not len(db):
        raise DataError("no snippet could be added to the database")
    save(db, args.out)
    logger.info("database %s holds %d entries", args.out, len(db))
    print(
        f"wrote {db.mode.name.lower()} database with {_count(len(db), 'entry')} "
        f"({added:,} new, {_count(db.skipped, 'snippet')} skipped) to {args.out}"
    )


def _train(args: argparse.Namespace):
    config = get_run_config(args)
    if config.train_file is None:
        raise ConfigError("no training file, use --train or set train_file in the config")
    training = config.training

    train_examples = prepare_examples(load_pairs(config.train_file), normalize=training.normalize)
    dev_examples = None
    if config.dev_file is not None:
        dev_examples = prepare_examples(load_pairs(config.dev_file), normalize=training.normalize)
    db = None
    if training.database:
        db = load(training.database, index_backend=args.index, seed=training.seed)

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dumpfn(config, out_dir / RUN_CONFIG_NAME, indent=2)

    result = train(
        training, train_examples, dev_examples, db=db, out_dir=out_dir, progress=not args.quiet
    )
    best = [m["dev_bleu"] for m in result.metrics if m["dev_bleu"] is not None]
    steps = _count(len(result.losses), "step")
    summary = f"trained for {steps}, final loss {result.losses[-1]:.4f}"
    if best:
        summary += f", best dev BLEU {max(best):.2f}"
    print(f"{summary}; outputs in {out_dir}")


def _generate(args: argparse.Namespace):
    model, db = load_model_and_database(args.model, args.db, args.index, _get_seed(args))
    query = make_query(args.intent, normalize=args.normalize)
    if not query.intent_tokens:
        raise DataError("the intent is empty")
    result = beam_decode(model, db, query.intent_tokens, width=args.beam, max_len=args.max_len)
    print(hypothesis_text(result.tokens, query))


def _evaluate(args: argparse.Namespace):
    model, db = load_model_and_database(args.model, args.db, args.index, _get_seed(args))
    examples = prepare_examples(load_pairs(args.test), normalize=args.normalize)
    result = evaluate(
        model,
        db,
        examples,
        width=args.beam,
        max_len=args.max_len,
        num_workers=args.workers,
        progress=not args.quiet,
    )
    if args.out:
        write_jsonl(args.out, result.records)
    print(f"BLEU {result.bleu:.2f} on {_count(len(examples), 'example')}")


def _overlap(args: argparse.Namespace):
    db = load(args.db)
    snippets = []
    skipped = 0
    for _, snippet in load_pairs(args.test, require_intent=False):
        try:
            if args.normalize:
                snippet = normalize_snippet(snippet).code
            snippets.append(code_tokens(snippet))
        except LexError:
            skipped += 1
    if skipped:
        warnings.warn(f"skipped {_count(skipped, 'snippet')} that could not be tokenized")
    print(f"{r_overlap(db, snippets):.4f}")


def _inspect_db(args: argparse.Namespace):
    db = load(args.db)
    for key, value in db.header().items():
        print(f"{key}: {value}")
    for ordinal in range(min(args.entries, len(db))):
        record = db[ordinal]
        neighbour = " ".join(db.code_vocab.decode([int(i) for i in record.neighbour]))
        continuation = " ".join(db.code_vocab.decode([int(i) for i in record.continuation]))
        kind = record.key_kind.name.lower()
        print(f"[{ordinal}] {kind} {record.source_id:016x} | {neighbour} | {continuation}")


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--seed", type=int, default=None, help="seed of every random choice (default: 0)"
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument(
        "-q", "--quiet", action="store_true", help="only log warnings, no progress bars"
    )


def _add_model_options(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--d-model", type=int, default=None, help=f"model width (default: {ModelConfig.d_model})"
    )
    parser.add_argument(
        "--num-neighbours",
        type=int,
        default=None,
        help=f"neighbours per chunk (default: {ModelConfig.num_neighbours})",
    )
    parser.add_argument(
        "--aggregation-period",
        type=int,
        default=None,
        help="decoder layers whose index is a multiple of this attend to the neighbours "
        f"(default: {ModelConfig.aggregation_period})",
    )
    parser.add_argument(
        "--aggregation",
        choices=aggregation_kinds,
        default=None,
        help=f"how intent and neighbours are attended to (default: {ModelConfig.aggregation})",
    )
    parser.add_argument(
        "--dropout",
        type=float,
        default=None,
        help=f"cross-attention dropout (default: {ModelConfig.dropout})",
    )
    parser.add_argument(
        "--no-retrieval",
        dest="retrieval",
        action="store_false",
        default=None,
        help="train the baseline model",
    )
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="any other model setting, VALUE parsed as JSON",
    )


def _add_index_option(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--index",
        choices=["auto", "exact", "ivf"],
        default="auto",
        help="nearest-neighbour index backend, seeded by --seed (default: %(default)s)",
    )


def _add_decode_options(parser: argparse.ArgumentParser):
    parser.add_argument("--model", required=True, help="model checkpoint")
    parser.add_argument("--db", default=None, help="database the model was trained with")
    parser.add_argument(
        "--beam",
        type=int,
        default=None,
        help=f"beam width (default: {ModelConfig.beam_width})",
    )
    parser.add_argument("--max-len", type=int, default=None, help="maximum code tokens")
    parser.add_argument(
        "--normalize",
        action="store_true",
        help="replace quoted intent entities by placeholders",
    )
    _add_index_option(parser)


def _get_parser():
    parser = _ArgumentParser(
        prog="retroseq",
        description="retroseq generates code from natural language with a "
        "retrieval-augmented transformer",
        epilog=f"Version: {__version__}",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add_command(name: str, func, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        _add_common(sub)
        sub.set_defaults(func=func)
        return sub

    sub = add_command("synth", _synth, "generate a synthetic intent/snippet corpus")
    sub.add_argument(
        "--pairs",
        type=int,
        default=2000,
        help="pairs in train, dev and test (default: %(default)s)",
    )
    sub.add_argument(
        "--duplicate-rate",
        type=float,
        default=0.0,
        help="probability that a dataset pair is paraphrased into the pool "
        "(default: %(default)s)",
    )
    sub.add_argument(
        "--pool-size", type=int, default=None, help="fresh pool pairs (default: --pairs)"
    )
    sub.add_argument("--out", required=True, help="output directory")

    sub = add_command("normalize", _normalize, "replace names and strings by placeholders")
    sub.add_argument("--input", required=True, help="pairs file (JSON-lines)")
    sub.add_argument("--out", required=True, help="normalized pairs file")

    sub = add_command("build-db", _build_db, "build or extend a chunk database")
    sub.add_argument("--input", required=True, nargs="+", help="pairs or snippet files")
    sub.add_argument(
        "--chunk-size",
        type=int,
        default=None,
        help=f"tokens per chunk (default: {ModelConfig.chunk_size})",
    )
    sub.add_argument(
        "--mode",
        choices=["classic", "hybrid"],
        default=None,
        help="database kind (default: classic)",
    )
    sub.add_argument(
        "--normalize", action="store_true", help="normalize snippets before chunking"
    )
    sub.add_argument("--append-to", default=None, help="existing database to extend")
    sub.add_argument(
        "--grow-vocab",
        action="store_true",
        help="add unknown tokens to the vocabulary of an extended database",
    )
    _add_index_option(sub)
    sub.add_argument("--out", required=True, help="database file")

    sub = add_command("train", _train, "train a model")
    sub.add_argument("--config", default=None, help="run config file (JSON or YAML)")
    sub.add_argument("--train", default=None, help="training pairs file")
    sub.add_argument("--dev", default=None, help="dev pairs file")
    sub.add_argument("--db", default=None, help="database file; omit for the baseline model")
    sub.add_argument("--out", default=None, help="output directory (default: run)")
    sub.add_argument(
        "--epochs",
        type=int,
        default=None,
        help=f"passes over the training set (default: {TrainConfig.epochs})",
    )
    sub.add_argument(
        "--batch-size",
        type=int,
        default=None,
        help=f"examples per step (default: {TrainConfig.batch_size})",
    )
    sub.add_argument(
        "--learning-rate",
        type=float,
        default=None,
        help=f"Adam step size (default: {TrainConfig.learning_rate})",
    )
    sub.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    sub.add_argument("--normalize", action="store_true", default=None, help="normalize the pairs")
    sub.add_argument(
        "--min-count",
        type=int,
        default=None,
        help=f"minimum token count of the vocabularies (default: {TrainConfig.min_count})",
    )
    sub.add_argument(
        "--dev-beam",
        type=int,
        default=None,
        help=f"dev beam width (default: {TrainConfig.dev_beam_width})",
    )
    sub.add_argument("--dev-max-len", type=int, default=None, help="maximum dev code tokens")
    _add_model_options(sub)
    _add_index_option(sub)

    sub = add_command("generate", _generate, "generate code for an intent")
    _add_decode_options(sub)
    sub.add_argument("--intent", required=True, help="the natural language intent")

    sub = add_command("evaluate", _evaluate, "decode a test set and report BLEU")
    _add_decode_options(sub)
    sub.add_argument("--test", required=True, help="test pairs file")
    sub.add_argument("--out", default=None, help="JSON-lines file of decoded examples")
    sub.add_argument(
        "--workers",
        type=int,
        default=get_num_threads(),
        help="examples decoded concurrently (default: %(default)s)",
    )

    sub = add_command("overlap", _overlap, "fraction of test chunks stored in a database")
    sub.add_argument("--db", required=True, help="database file")
    sub.add_argument("--test", required=True, help="test pairs file")
    sub.add_argument("--normalize", action="store_true", help="normalize the test snippets")

    sub = add_command("inspect-db", _inspect_db, "print a database header and entries")
    sub.add_argument("--db", required=True, help="database file")
    sub.add_argument(
        "-n", "--entries", type=int, default=5, help="entries to print (default: %(default)s)"
    )
    return parser


def _configure_logging(args: argparse.Namespace):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("retroseq").setLevel(level)


def run(argv: Sequence[str] | None = None) -> int:
    """Runs the command line interface.

    Args:
        argv: The arguments, without the program name. Defaults to
            ``sys.argv[1:]``.

    Returns:
        The exit code: 0 on success, 1 on a usage or configuration error, 2
        on a data error and 3 on an internal error.
    """
    parser = _get_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0

    _configure_logging(args)
    warnings.filterwarnings("ignore", category=DeprecationWarning)

    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"retroseq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"retroseq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("retroseq %s failed", args.command)
        return 3
    return 0


def main():
    sys.exit(run())
