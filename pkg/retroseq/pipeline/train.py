"""Training of RetroSeq models.

Training minimizes the copy-aware cross-entropy of :meth:`RetroSeqModel.loss`
with Adam, using neighbours precomputed once from the ground-truth chunks. A
dev set, when given, is decoded after every epoch and the parameters of the
best dev BLEU are kept.
"""
from __future__ import annotations

import logging
import time
from collections import namedtuple
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from monty.json import MSONable
from tqdm import tqdm

from retroseq.model.checkpoint import save_model
from retroseq.model.config import ModelConfig
from retroseq.model.network import RetroSeqModel
from retroseq.pipeline.data import Example, build_vocabularies
from retroseq.pipeline.decode import evaluate
from retroseq.pipeline.neighbours import NeighbourCache, precompute_neighbours
from retroseq.pipeline.vocab import Vocabulary
from retroseq.retrieve.datastore import Database, DatabaseMode
from retroseq.tensor.engine import NonFiniteError, grad, stack
from retroseq.tensor.optim import Adam
from retroseq.util import ConfigError, DataError, batched, write_jsonl

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.rsmd"
METRICS_NAME = "metrics.jsonl"

TrainResult = namedtuple("TrainResult", ["model", "losses", "metrics"])
TrainResult.__doc__ = """The outcome of a training run.

Attributes:
    model: The model holding the parameters of the best epoch, in evaluation
        mode.
    losses: The batch loss of every step.
    metrics: One record per epoch with the mean loss, the dev BLEU and the
        wall time.
"""

TrainingItem = namedtuple("TrainingItem", ["source", "targets", "source_id"])


@dataclass
class TrainConfig(MSONable):
    """Settings of a training run.

    Args:
        model: Model settings overriding the :obj:`ModelConfig` defaults. The
            vocabularies, chunk size and first-chunk mode are derived from the
            data and the database.
        epochs: Number of passes over the training set.
        batch_size: Examples per optimizer step.
        learning_rate: The Adam step size.
        max_steps: Stop after this many steps, if set.
        seed: Seed of the weights, dropout and example order.
        database: Path of the database file, or ``None`` to train a model
            without retrieval.
        normalize: Whether the pairs are normalized before training.
        min_count: Minimum number of occurrences of a vocabulary token.
        dev_beam_width: Beam width used to decode the dev set.
        dev_max_len: Maximum length of dev set decodes. Defaults to the model
            setting.
    """

    model: dict = field(default_factory=dict)
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    max_steps: int | None = None
    seed: int = 0
    database: str | None = None
    normalize: bool = False
    min_count: int = 1
    dev_beam_width: int = 1
    dev_max_len: int | None = None

    def __post_init__(self):
        self.model = dict(self.model)
        for name in ("epochs", "batch_size", "min_count", "dev_beam_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must not be negative")
        derived = sorted({"code_vocab", "nl_vocab", "first_chunk_mode", "seed"} & set(self.model))
        if derived:
            raise ConfigError(f"model settings {', '.join(derived)} are set by the trainer")


def check_vocabularies(config: ModelConfig, db: Database):
    """Checks that the model vocabularies extend those of a database.

    Raises:
        VocabularyMismatchError: If a model vocabulary reassigns a database id.
    """
    db.code_vocab.check_prefix_of(Vocabulary(config.code_vocab), "model code vocabulary")
    db.nl_vocab.check_prefix_of(Vocabulary(config.nl_vocab), "model intent vocabulary")


def get_model_config(
    config: TrainConfig, examples: Sequence[Example], db: Database | None = None
) -> ModelConfig:
    """Gets the model settings of a training run.

    The vocabularies extend the database vocabularies with the training
    tokens. Without a database, the model does not use retrieval.

    Args:
        config: The training settings.
        examples: The training examples.
        db: The database.

    Returns:
        The model config.
    """
    settings = dict(config.model)
    if db is None:
        if settings.get("retrieval", False):
            raise ConfigError("a retrieval model needs a database")
        settings["retrieval"] = False
        code_vocab, nl_vocab = build_vocabularies(examples, config.min_count)
    else:
        if settings.setdefault("chunk_size", db.chunk_size) != db.chunk_size:
            raise ConfigError(
                f"chunk size {settings['chunk_size']} differs from the database "
                f"chunk size {db.chunk_size}"
            )
        settings["first_chunk_mode"] = "hybrid" if db.mode == DatabaseMode.HYBRID else "identity"
        code_vocab, nl_vocab = build_vocabularies(
            examples, config.min_count, db.code_vocab, db.nl_vocab
        )
    settings.update(code_vocab=code_vocab.tokens, nl_vocab=nl_vocab.tokens, seed=config.seed)
    model_config = ModelConfig.from_settings(settings)
    if db is not None:
        check_vocabularies(model_config, db)
    return model_config


def get_training_items(model: RetroSeqModel, examples: Sequence[Example]) -> list[TrainingItem]:
    """Gets the source maps and target ids of the training examples."""
    items = []
    for example in examples:
        source = model.encode_source(example.intent_tokens)
        targets = model.encode_target(example.code_tokens, source)
        items.append(TrainingItem(source, targets, example.source_id))
    return items


def get_neighbour_cache(
    model: RetroSeqModel,
    items: Sequence[TrainingItem],
    db: Database | None,
    progress: bool = False,
) -> NeighbourCache | None:
    """Retrieves the neighbours of every training chunk.

    Returns:
        The neighbour cache, or ``None`` if the model does not use retrieval.
    """
    if db is None or not model.config.retrieval:
        return None
    queries = [
        (
            item.targets,
            db.encode_intent(item.source.tokens),
            item.source_id,
            model.required_chunks(len(item.targets)),
        )
        for item in items
    ]
    return precompute_neighbours(queries, db, model.config.num_neighbours, progress=progress)


def batch_loss(
    model: RetroSeqModel,
    items: Sequence[TrainingItem],
    indices: Sequence[int],
    cache: NeighbourCache | None,
):
    """Gets the mean loss of a batch of training examples."""
    losses = []
    for index in indices:
        item = items[index]
        neighbours = cache.values(index) if cache is not None else None
        losses.append(model.loss(item.source, item.targets, neighbours))
    return stack(losses).mean()


def _diagnose(model: RetroSeqModel) -> str:
    largest = max(
        model.named_parameters().items(), key=lambda kv: float(np.abs(kv[1].data).max())
    )
    return f"largest parameter {largest[0]} reaches {float(np.abs(largest[1].data).max()):.3g}"


def train(
    config: TrainConfig,
    train_examples: Sequence[Example],
    dev_examples: Sequence[Example] | None = None,
    db: Database | None = None,
    out_dir: str | Path | None = None,
    progress: bool = False,
) -> TrainResult:
    """Trains a model.

    The run is fully determined by the settings, the data and the database:
    the same inputs give identical losses and checkpoints.

    Args:
        config: The training settings.
        train_examples: The training examples.
        dev_examples: Examples decoded after every epoch to select the best
            parameters. Without them, the last epoch is kept.
        db: The database, or ``None`` to train a model without retrieval.
        out_dir: Directory receiving the best checkpoint
            (``model.rsmd``) and the epoch metrics (``metrics.jsonl``).
        progress: Whether to show a progress bar.

    Returns:
        The trained model, the step losses and the epoch metrics.
    """
    if not train_examples:
        raise DataError("cannot train on an empty training set")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    model = RetroSeqModel(get_model_config(config, train_examples, db))
    logger.info("training %r", model)
    items = get_training_items(model, train_examples)
    cache = get_neighbour_cache(model, items, db, progress=progress)
    params = model.named_parameters()
    optimizer = Adam(params, learning_rate=config.learning_rate)
    rng = np.random.default_rng([config.seed, 2])

    n_batches = -(-len(items) // config.batch_size)
    total_steps = config.epochs * n_batches
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    losses: list[float] = []
    metrics: list[dict] = []
    best_bleu = None
    best_params = None
    start = time.perf_counter()
    bar = tqdm(total=total_steps, desc="training", disable=not progress)
    for epoch in range(1, config.epochs + 1):
        model.train()
        epoch_losses = []
        for indices in batched(list(rng.permutation(len(items))), config.batch_size):
            loss = batch_loss(model, items, indices, cache)
            value = loss.item()
            if not np.isfinite(value):
                bar.close()
                raise NonFiniteError(
                    f"loss became {value} at step {len(losses) + 1} (epoch {epoch}, "
                    f"examples {[int(i) for i in indices]}); {_diagnose(model)}"
                )
            optimizer.step(grad(loss, params))
            losses.append(value)
            epoch_losses.append(value)
            logger.debug("step %d loss %.6f", len(losses), value)
            bar.update()
            bar.set_postfix(loss=f"{value:.4f}")
            if len(losses) >= total_steps:
                break

        dev_bleu = None
        if dev_examples:
            dev_bleu = evaluate(
                model, db, dev_examples, width=config.dev_beam_width, max_len=config.dev_max_len
            ).bleu
        metrics.append(
            {
                "epoch": epoch,
                "steps": len(losses),
                "loss": float(np.mean(epoch_losses)),
                "dev_bleu": dev_bleu,
                "wall_time": time.perf_counter() - start,
            }
        )
        logger.info(
            "epoch %d: loss %.4f, dev BLEU %s",
            epoch,
            metrics[-1]["loss"],
            "n/a" if dev_bleu is None else f"{dev_bleu:.2f}",
        )

        if dev_bleu is None or best_bleu is None or dev_bleu > best_bleu:
            best_bleu = dev_bleu
            best_params = {name: param.data.copy() for name, param in params.items()}
            if out_dir is not None:
                save_model(model, out_dir / CHECKPOINT_NAME)
        if out_dir is not None:
            write_jsonl(out_dir / METRICS_NAME, metrics)
        if len(losses) >= total_steps:
            break
    bar.close()

    model.load_parameters(best_params)
    model.eval()
    return TrainResult(model, losses, metrics)

