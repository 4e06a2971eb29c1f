"""This module implements the retrieval-augmented code generation network.

The network has three stacks:

- an intent encoder of self-attention and feed-forward sublayers,
- a neighbour encoder applied to every retrieved ``[N, F]`` record, either a
  plain encoder or one that also cross-attends to the decoder states of the
  chunk that triggered the retrieval,
- a code decoder whose layers cross-attend to the intent and, every
  ``aggregation_period`` layers, to the neighbours of each chunk.

A pointer head mixes the vocabulary softmax with a copy distribution over the
intent tokens.

Decoder inputs start with the BOS token, so input position ``t`` predicts
code token ``t``. Chunk ``u`` (1-based) covers input positions
``(u - 1) * m`` to ``u * m - 1``; its neighbours are retrieved with code
tokens ``(u - 2) * m`` to ``(u - 1) * m - 1``, all of which are inputs of
earlier chunks.
"""
from __future__ import annotations

import logging
from collections import namedtuple
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from retroseq.model.config import ModelConfig
from retroseq.nn.functional import MissingNeighboursError, SublayerKind
from retroseq.nn.layers import Embedding, Linear, Module, Sublayer
from retroseq.tensor.engine import ShapeError, Tensor, concat, grad, tensor, zeros
from retroseq.util import BOS_ID, EOS_ID, UNK_ID, DataError

logger = logging.getLogger(__name__)

LOSS_EPS = 1e-10

SourceMap = namedtuple("SourceMap", ["tokens", "nl_ids", "copy_ids", "oov_tokens"])
SourceMap.__doc__ = """An intent prepared for the network.

Attributes:
    tokens: The intent tokens.
    nl_ids: Intent vocabulary ids, UNK for unknown tokens.
    copy_ids: For every intent position, the code vocabulary id of the token
        or, when the code vocabulary lacks it, an extended id ``>= V``.
    oov_tokens: The intent tokens given extended ids, in id order.
"""


@dataclass
class DecoderState:
    """Intermediate values of one decoder pass.

    Attributes:
        e_nl: The intent encoding.
        e_nb: The neighbour encoding of every chunk, ``None`` for chunks
            without neighbours.
        layers: The output of every decoder layer.
        copy_weights: Head-averaged intent cross-attention weights of the last
            decoder layer, shape ``(L, |X|)``.
    """

    e_nl: Tensor
    e_nb: dict[int, Tensor | None]
    layers: list[Tensor] = field(default_factory=list)
    copy_weights: Tensor | None = None

    @property
    def top(self) -> Tensor:
        return self.layers[-1]


class EncodingCache:
    """Memoizes encoder outputs while decoding a single intent.

    Only valid while the weights do not change and gradients are not needed.

    Args:
        e_nl: The intent encoding.
    """

    def __init__(self, e_nl: Tensor):
        self.e_nl = e_nl
        self.neighbours: dict[bytes, Tensor | None] = {}


class EncoderLayer(Module):
    """Self-attention and feed-forward sublayers, with an optional cross-attention.

    Args:
        config: The model configuration.
        rng: Random generator used for initialization.
        dropout_rng: Random generator used for dropout masks.
        conditioned: Whether a cross-attention sublayer to a memory sits
            between self-attention and feed-forward.
    """

    def __init__(
        self,
        config: ModelConfig,
        rng: np.random.Generator,
        dropout_rng: np.random.Generator,
        conditioned: bool = False,
    ):
        d, h = config.d_model, config.heads
        self.self_attention = Sublayer(SublayerKind.SA, d, h, rng)
        self.cross_attention = None
        if conditioned:
            self.cross_attention = Sublayer(
                SublayerKind.CA, d, h, rng, dropout_rate=config.dropout, dropout_rng=dropout_rng
            )
        self.feed_forward = Sublayer(SublayerKind.FFW, d, h, rng, ffw_dim=config.ffw_dim)

    def __call__(self, x: Tensor, memory: Tensor | None = None) -> Tensor:
        x = self.self_attention(x)
        if self.cross_attention is not None:
            x = self.cross_attention(x, memory)
        return self.feed_forward(x)


class DecoderLayer(Module):
    """One code decoder layer.

    Baseline layers apply causal self-attention, cross-attention to the intent
    and a feed-forward sublayer. Sequential aggregation layers insert chunked
    cross-attention to the neighbours after the intent cross-attention.
    Parallel aggregation layers compute both cross-attentions from the
    self-attention output and merge their concatenation with a linear map.

    Args:
        index: The 1-based layer index.
        config: The model configuration.
        rng: Random generator used for initialization.
        dropout_rng: Random generator used for dropout masks.
    """

    def __init__(
        self,
        index: int,
        config: ModelConfig,
        rng: np.random.Generator,
        dropout_rng: np.random.Generator,
    ):
        d, h = config.d_model, config.heads
        self.index = index
        self.aggregation = config.aggregation if config.is_aggregation_layer(index) else None

        self.self_attention = Sublayer(SublayerKind.SA, d, h, rng, causal=True)
        self.nl_attention = Sublayer(
            SublayerKind.CA, d, h, rng, dropout_rate=config.dropout, dropout_rng=dropout_rng
        )
        self.neighbour_attention = None
        self.merge = None
        if self.aggregation is not None:
            self.neighbour_attention = Sublayer(
                SublayerKind.CCA,
                d,
                h,
                rng,
                dropout_rate=config.dropout,
                dropout_rng=dropout_rng,
                chunk_size=config.chunk_size,
                first_chunk_mode=config.first_chunk_mode,
            )
        if self.aggregation == "parallel":
            self.merge = Linear(2 * d, d, rng)
        self.feed_forward = Sublayer(SublayerKind.FFW, d, h, rng, ffw_dim=config.ffw_dim)

    def __call__(
        self,
        states: Tensor,
        e_nl: Tensor,
        e_nb: Mapping[int, Tensor | None] | None = None,
        return_weights: bool = False,
    ) -> Tensor | tuple[Tensor, Tensor]:
        states = self.self_attention(states)
        if self.aggregation is not None and e_nb is None:
            raise MissingNeighboursError(
                f"decoder layer {self.index} aggregates neighbours but none were given"
            )

        if self.aggregation == "parallel":
            nl_states, weights = self.nl_attention(states, e_nl, return_weights=True)
            neighbour_states = self.neighbour_attention(states, e_nb)
            states = self.merge(concat([nl_states, neighbour_states], axis=-1))
        else:
            states, weights = self.nl_attention(states, e_nl, return_weights=True)
            if self.aggregation == "sequential":
                states = self.neighbour_attention(states, e_nb)

        states = self.feed_forward(states)
        if return_weights:
            return states, weights
        return states


class RetroSeqModel(Module):
    """The retrieval-augmented encoder-decoder with a pointer head.

    Weights are initialized from ``config.seed``; dropout masks come from a
    second generator derived from the same seed, so a training run is fully
    determined by the config.

    Args:
        config: The model configuration.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self._code_index = {token: i for i, token in enumerate(config.code_vocab)}
        self._nl_index = {token: i for i, token in enumerate(config.nl_vocab)}

        rng = np.random.default_rng(config.seed)
        self.dropout_rng = np.random.default_rng([config.seed, 1])
        d = config.d_model
        conditioned = config.neighbour_encoder == "conditioned"

        self.nl_embedding = Embedding(len(config.nl_vocab), d, rng)
        self.code_embedding = Embedding(len(config.code_vocab), d, rng)
        self.nl_encoder = [
            EncoderLayer(config, rng, self.dropout_rng) for _ in range(config.nl_layers)
        ]
        self.neighbour_encoder = []
        if config.retrieval:
            self.neighbour_encoder = [
                EncoderLayer(config, rng, self.dropout_rng, conditioned=conditioned)
                for _ in range(config.neighbour_layers)
            ]
        self.decoder = [
            DecoderLayer(i, config, rng, self.dropout_rng)
            for i in range(1, config.decoder_layers + 1)
        ]
        self.output = Linear(d, len(config.code_vocab), rng)
        self.gate = Linear(d, 1, rng)

    def __repr__(self):
        config = self.config
        return (
            f"RetroSeqModel(d_model={config.d_model}, decoder_layers={config.decoder_layers}, "
            f"aggregation_layers={config.aggregation_layers}, "
            f"parameters={self.parameter_count()})"
        )

    @property
    def code_vocab_size(self) -> int:
        return len(self.config.code_vocab)

    @property
    def conditioned(self) -> bool:
        return self.config.neighbour_encoder == "conditioned"

    # inputs ------------------------------------------------------------------

    def encode_source(self, nl_tokens: Sequence[str]) -> SourceMap:
        """Maps intent tokens to encoder ids and pointer targets.

        Args:
            nl_tokens: The intent tokens. Truncated to ``max_nl_len``.

        Returns:
            The source map of the intent.
        """
        tokens = list(nl_tokens)[: self.config.max_nl_len]
        if not tokens:
            raise DataError("cannot encode an empty intent")

        nl_ids = [self._nl_index.get(token, UNK_ID) for token in tokens]
        oov_tokens: list[str] = []
        copy_ids = []
        for token in tokens:
            if token in self._code_index:
                copy_ids.append(self._code_index[token])
                continue
            if token not in oov_tokens:
                oov_tokens.append(token)
            copy_ids.append(self.code_vocab_size + oov_tokens.index(token))
        return SourceMap(tokens, nl_ids, copy_ids, oov_tokens)

    def encode_target(self, code_tokens: Sequence[str], source: SourceMap) -> list[int]:
        """Gets the target ids of a code sequence, terminated by EOS.

        Tokens missing from the code vocabulary get the extended id of the
        matching intent token when there is one, else UNK.
        """
        ids = []
        for token in list(code_tokens)[: self.config.max_code_len]:
            if token in self._code_index:
                ids.append(self._code_index[token])
            elif token in source.oov_tokens:
                ids.append(self.code_vocab_size + source.oov_tokens.index(token))
            else:
                ids.append(UNK_ID)
        return ids + [EOS_ID]

    def decode_ids(self, ids: Iterable[int], source: SourceMap) -> list[str]:
        """Maps code ids, extended ids included, back to tokens."""
        vocab = self.config.code_vocab
        return [
            vocab[i] if i < len(vocab) else source.oov_tokens[i - len(vocab)] for i in ids
        ]

    def required_chunks(self, length: int) -> list[int]:
        """Gets the chunks of a decoder input of ``length`` tokens that need neighbours."""
        if not self.config.retrieval or not self.config.aggregation_layers:
            return []
        first = 1 if self.config.first_chunk_mode == "hybrid" else 2
        n_chunks = -(-length // self.config.chunk_size)
        return list(range(first, n_chunks + 1))

    # encoders ----------------------------------------------------------------

    def encode_nl(self, nl_ids: Sequence[int]) -> Tensor:
        """Encodes an intent.

        Args:
            nl_ids: Intent vocabulary ids. Unknown tokens must already be
                mapped to UNK.

        Returns:
            The encoding, shape ``(|X|, d_model)``.
        """
        ids = np.asarray(nl_ids, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise DataError("cannot encode an empty intent")
        if ids.min() < 0 or ids.max() >= len(self.config.nl_vocab):
            raise ValueError("intent ids outside the vocabulary; map unknown tokens to UNK first")

        x = self.nl_embedding(ids)
        for layer in self.nl_encoder:
            x = layer(x)
        return x

    def encode_neighbours(
        self, values: np.ndarray, conditioning: Tensor | None = None
    ) -> Tensor | None:
        """Encodes the neighbours retrieved for one chunk.

        Args:
            values: The ``[N, F]`` records, shape ``(k, 2m)``.
            conditioning: Hidden states the conditioned encoder attends to.
                Ignored by the classic encoder.

        Returns:
            The encodings of all records concatenated along the first axis,
            shape ``(k * 2m, d_model)``, or ``None`` when there are no records.
        """
        values = np.asarray(values, dtype=np.int64)
        width = 2 * self.config.chunk_size
        if values.ndim != 2 or values.shape[1] != width:
            raise ShapeError(
                f"neighbour records have shape {values.shape}, expected (k, {width})"
            )
        if len(values) == 0:
            return None
        if values.min() < 0 or values.max() >= self.code_vocab_size:
            raise ValueError("neighbour ids outside the code vocabulary")

        x = self.code_embedding(values)
        memory = conditioning if self.conditioned else None
        for layer in self.neighbour_encoder:
            x = layer(x, memory)
        return x.reshape(len(values) * width, self.config.d_model)

    def _encode_chunk_neighbours(
        self,
        neighbours: Mapping[int, np.ndarray],
        chunks: Sequence[int],
        e_nl: Tensor,
        states: Tensor,
        cache: EncodingCache | None,
    ) -> dict[int, Tensor | None]:
        m = self.config.chunk_size
        encodings = {}
        for u in chunks:
            values = np.asarray(neighbours[u], dtype=np.int64)
            if self.conditioned:
                conditioning = e_nl if u == 1 else states[(u - 2) * m : (u - 1) * m]
                encodings[u] = self.encode_neighbours(values, conditioning)
            elif cache is not None:
                key = values.tobytes()
                if key not in cache.neighbours:
                    cache.neighbours[key] = self.encode_neighbours(values)
                encodings[u] = cache.neighbours[key]
            else:
                encodings[u] = self.encode_neighbours(values)
        return encodings

    # decoder -----------------------------------------------------------------

    def decode_layer(
        self,
        index: int,
        states: Tensor,
        e_nl: Tensor,
        e_nb: Mapping[int, Tensor | None] | None = None,
        return_weights: bool = False,
    ) -> Tensor | tuple[Tensor, Tensor]:
        """Applies decoder layer ``index`` (1-based)."""
        if not 1 <= index <= len(self.decoder):
            raise IndexError(f"decoder layer {index} out of range 1..{len(self.decoder)}")
        return self.decoder[index - 1](states, e_nl, e_nb, return_weights=return_weights)

    def run(
        self,
        source: SourceMap,
        inputs: Sequence[int],
        neighbours: Mapping[int, np.ndarray] | None = None,
        cache: EncodingCache | None = None,
    ) -> DecoderState:
        """Runs the encoders and the decoder over the shifted gold target.

        Args:
            source: The intent.
            inputs: Decoder input ids starting with BOS. Extended ids are fed
                back as UNK.
            neighbours: The ``(k, 2m)`` neighbour records of every chunk that
                needs them (see :meth:`required_chunks`).
            cache: Encoder outputs reused across calls for the same intent.

        Returns:
            The decoder state.
        """
        ids = np.asarray(inputs, dtype=np.int64)
        if ids.ndim != 1 or len(ids) == 0:
            raise ShapeError("decoder input must be a non-empty sequence")
        ids = np.where(ids >= self.code_vocab_size, UNK_ID, ids)

        neighbours = neighbours or {}
        chunks = self.required_chunks(len(ids))
        missing = [u for u in chunks if u not in neighbours]
        if missing:
            raise MissingNeighboursError(f"no neighbours given for chunks {missing}")

        e_nl = cache.e_nl if cache is not None else self.encode_nl(source.nl_ids)
        state = DecoderState(e_nl, {})
        states = self.code_embedding(ids)
        encoded = not chunks
        last = len(self.decoder)
        for layer in self.decoder:
            e_nb = None
            if layer.aggregation is not None:
                if not encoded:
                    # conditioned encodings see the input of the first aggregation layer
                    state.e_nb = self._encode_chunk_neighbours(
                        neighbours, chunks, e_nl, states, cache
                    )
                    encoded = True
                e_nb = state.e_nb
            if layer.index == last:
                states, state.copy_weights = layer(states, e_nl, e_nb, return_weights=True)
            else:
                states = layer(states, e_nl, e_nb)
            state.layers.append(states)
        return state

    def output_distribution(
        self,
        states: Tensor,
        source: SourceMap,
        copy_weights: Tensor,
        gate_override: float | None = None,
    ) -> Tensor:
        """Mixes the vocabulary softmax with the copy distribution.

        Args:
            states: Top decoder states, shape ``(L, d_model)``.
            source: The intent.
            copy_weights: Attention of every position over the intent, shape
                ``(L, |X|)``.
            gate_override: Forces the gate to this value instead of the
                learned ``sigmoid(w . state + b)``.

        Returns:
            Probabilities over the code vocabulary followed by the extended
            ids of the intent, shape ``(L, V + len(source.oov_tokens))``.
        """
        length = states.shape[0]
        n_extended = self.code_vocab_size + len(source.oov_tokens)

        p_vocab = self.output(states).softmax(-1)
        if source.oov_tokens:
            p_vocab = concat([p_vocab, zeros(length, len(source.oov_tokens))], axis=-1)

        # copy mass of repeated tokens accumulates on the same id
        scatter = np.zeros((len(source.copy_ids), n_extended))
        scatter[np.arange(len(source.copy_ids)), source.copy_ids] = 1.0
        p_copy = copy_weights @ tensor(scatter)

        if gate_override is None:
            gate = self.gate(states).sigmoid()
        else:
            gate = tensor(np.full((length, 1), gate_override))
        return p_vocab * gate + p_copy * (1.0 - gate)

    def forward(
        self,
        source: SourceMap,
        inputs: Sequence[int],
        neighbours: Mapping[int, np.ndarray] | None = None,
        gate_override: float | None = None,
        cache: EncodingCache | None = None,
    ) -> Tensor:
        """Gets the next-token distribution at every decoder input position.

        Returns:
            Probabilities of shape ``(len(inputs), V + len(source.oov_tokens))``.
        """
        state = self.run(source, inputs, neighbours, cache)
        return self.output_distribution(state.top, source, state.copy_weights, gate_override)

    __call__ = forward

    def loss(
        self,
        source: SourceMap,
        targets: Sequence[int],
        neighbours: Mapping[int, np.ndarray] | None = None,
        gate_override: float | None = None,
    ) -> Tensor:
        """Gets the mean negative log-likelihood of a target sequence.

        Args:
            source: The intent.
            targets: Target ids ending with EOS, as returned by
                :meth:`encode_target`.
            neighbours: Neighbour records of the required chunks.
            gate_override: Forces the pointer gate.

        Returns:
            A scalar tensor.
        """
        targets = np.asarray(targets, dtype=np.int64)
        inputs = np.concatenate([[BOS_ID], targets[:-1]])
        probs = self.forward(source, inputs, neighbours, gate_override)
        picked = probs[np.arange(len(targets)), targets]
        return -(picked + LOSS_EPS).log().mean()

    # bookkeeping -------------------------------------------------------------

    def parameter_count(self) -> int:
        """Gets the total number of trainable scalars."""
        return int(sum(param.size for param in self.parameters()))

    def gradient_census(
        self,
        batch: Iterable[tuple[SourceMap, Sequence[int], Mapping[int, np.ndarray] | None]],
    ) -> dict[str, float]:
        """Gets the largest absolute gradient of every parameter over a batch.

        Args:
            batch: ``(source, targets, neighbours)`` triples.

        Returns:
            The largest absolute gradient entry of each parameter, keyed by
            name. A zero marks a parameter no example reached.
        """
        params = self.named_parameters()
        census = dict.fromkeys(params, 0.0)
        for source, targets, neighbours in batch:
            grads = grad(self.loss(source, targets, neighbours), params)
            for name, value in grads.items():
                census[name] = max(census[name], float(np.abs(value).max()))
        dead = [name for name, value in census.items() if value == 0]
        if dead:
            logger.info("%d parameters received no gradient: %s", len(dead), ", ".join(dead))
        return census

    def load_parameters(self, params: Mapping[str, np.ndarray]):
        """Copies values into the parameters of this model.

        Args:
            params: Values keyed by parameter name. Every parameter must be
                present with a matching shape.
        """
        own = self.named_parameters()
        if set(own) != set(params):
            missing = sorted(set(own) - set(params))
            extra = sorted(set(params) - set(own))
            raise ValueError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, param in own.items():
            value = np.asarray(params[name])
            if value.shape != param.shape:
                raise ShapeError(
                    f"parameter {name} has shape {value.shape}, expected {param.shape}"
                )
            param.data[...] = value
