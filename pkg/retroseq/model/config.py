"""Hyperparameters of the code generation network.

Attributes:
    aggregation_kinds: The ways neighbour information is merged in an
        aggregation layer.
    neighbour_encoder_kinds: The neighbour encoder variants.
    first_chunk_modes: How the first decoder chunk is treated by chunked
        cross-attention.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from monty.json import MSONable

from retroseq.util import ConfigError, special_tokens

aggregation_kinds = ("sequential", "parallel")
neighbour_encoder_kinds = ("classic", "conditioned")
first_chunk_modes = ("identity", "hybrid")


@dataclass
class ModelConfig(MSONable):
    """Architecture and decoding settings of a :obj:`RetroSeqModel`.

    The defaults are the published hyperparameters: 6-layer encoders and
    decoder with 8 heads, two neighbours and chunked cross-attention every
    third decoder layer.

    Args:
        code_vocab: The code vocabulary, special tokens first.
        nl_vocab: The intent vocabulary, special tokens first.
        d_model: Model width.
        heads: Number of attention heads.
        nl_layers: Number of intent encoder layers.
        neighbour_layers: Number of neighbour encoder layers.
        decoder_layers: Number of decoder layers.
        ffw_dim: Hidden width of the feed-forward networks. Defaults to
            ``4 * d_model``.
        chunk_size: Number of code tokens per retrieval chunk.
        num_neighbours: Neighbours retrieved per chunk.
        aggregation_period: Decoder layers whose 1-based index is a multiple
            of this value attend to the neighbours.
        aggregation: ``"sequential"`` or ``"parallel"``.
        neighbour_encoder: ``"classic"`` or ``"conditioned"``.
        first_chunk_mode: ``"identity"`` for code-keyed databases, ``"hybrid"``
            when the first chunk attends to intent-retrieved neighbours.
        retrieval: Whether neighbours are used at all. With ``False`` every
            decoder layer is a baseline layer.
        dropout: Dropout rate of the cross-attention weights.
        beam_width: Default beam width used for decoding.
        max_code_len: Maximum number of generated code tokens.
        max_nl_len: Intents are truncated to this many tokens.
        seed: Seed of the weight initialization and dropout masks.
    """

    code_vocab: list[str] = field(default_factory=lambda: list(special_tokens))
    nl_vocab: list[str] = field(default_factory=lambda: list(special_tokens))
    d_model: int = 256
    heads: int = 8
    nl_layers: int = 6
    neighbour_layers: int = 6
    decoder_layers: int = 6
    ffw_dim: int | None = None
    chunk_size: int = 8
    num_neighbours: int = 2
    aggregation_period: int = 3
    aggregation: str = "sequential"
    neighbour_encoder: str = "classic"
    first_chunk_mode: str = "identity"
    retrieval: bool = True
    dropout: float = 0.4
    beam_width: int = 15
    max_code_len: int = 100
    max_nl_len: int = 100
    seed: int = 0

    def __post_init__(self):
        self.code_vocab = list(self.code_vocab)
        self.nl_vocab = list(self.nl_vocab)
        if self.ffw_dim is None:
            self.ffw_dim = 4 * self.d_model

        for name, vocab in (("code", self.code_vocab), ("nl", self.nl_vocab)):
            if tuple(vocab[: len(special_tokens)]) != special_tokens:
                raise ConfigError(f"{name} vocabulary must start with {special_tokens}")

        positive = [
            "d_model",
            "heads",
            "nl_layers",
            "decoder_layers",
            "ffw_dim",
            "chunk_size",
            "num_neighbours",
            "aggregation_period",
            "beam_width",
            "max_code_len",
            "max_nl_len",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.neighbour_layers < 0:
            raise ConfigError("neighbour_layers must not be negative")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if (self.d_model // self.heads) % 2:
            raise ConfigError("rotary embeddings need an even head width")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

        for name, allowed in (
            ("aggregation", aggregation_kinds),
            ("neighbour_encoder", neighbour_encoder_kinds),
            ("first_chunk_mode", first_chunk_modes),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(
                    f"{name} must be one of {', '.join(allowed)}, got {getattr(self, name)!r}"
                )

    @property
    def aggregation_layers(self) -> list[int]:
        """The 1-based indices of the decoder layers that attend to neighbours."""
        if not self.retrieval:
            return []
        return [
            i for i in range(1, self.decoder_layers + 1) if i % self.aggregation_period == 0
        ]

    def is_aggregation_layer(self, index: int) -> bool:
        return index in self.aggregation_layers

    @classmethod
    def from_settings(cls, settings: dict) -> ModelConfig:
        """Creates a config from a plain dictionary, rejecting unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(k for k in settings if k not in known and not k.startswith("@"))
        if unknown:
            raise ConfigError(f"unknown model settings: {', '.join(unknown)}")
        return cls(**{k: v for k, v in settings.items() if k in known})

    def settings(self) -> dict:
        """Gets the config as a plain dictionary of its fields."""
        return {f.name: getattr(self, f.name) for f in fields(self)}
