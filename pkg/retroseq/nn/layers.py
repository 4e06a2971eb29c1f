"""This module implements the parameter-holding transformer layers."""
from __future__ import annotations

import math
from collections.abc import Iterator, Mapping, Sequence

import numpy as np

from retroseq.nn.functional import (
    AttentionParams,
    FirstChunkMode,
    SublayerKind,
    chunked_cross_attention,
    gelu,
    multi_head_attention,
    rms_norm,
)
from retroseq.tensor.engine import ShapeError, Tensor, matmul
from retroseq.util import RetroSeqError


class MissingInputError(RetroSeqError, ValueError):
    """Raised when a cross-attention sublayer is called without its memory."""


class Module:
    """Base class of everything holding trainable parameters.

    Parameters are the :obj:`Tensor` attributes with ``requires_grad`` set,
    collected recursively through child modules and lists of modules in the
    order the attributes were assigned.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Gets all parameters keyed by their dotted attribute path."""
        params = {}
        for name, value in vars(self).items():
            for path, param in _walk(value, prefix + name):
                params[path] = param
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            children = value if isinstance(value, (list, tuple)) else [value]
            for child in children:
                if isinstance(child, Module):
                    yield from child.modules()

    def train(self, mode: bool = True) -> Module:
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)


def _walk(value, path: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".").items()
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    """Gets a parameter drawn from the scaled uniform distribution.

    Values lie in ``[-limit, limit]`` with ``limit = sqrt(6 / (fan_in + fan_out))``.
    """
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


class Linear(Module):
    """An affine map ``x @ weight + bias``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, in_dim, out_dim)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Embedding(Module):
    """A lookup table of token vectors."""

    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator):
        self.weight = Tensor(
            rng.normal(0.0, 1.0 / math.sqrt(dim), size=(num_embeddings, dim)),
            requires_grad=True,
        )

    @property
    def num_embeddings(self) -> int:
        return self.weight.shape[0]

    def __call__(self, ids: Sequence[int] | np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        return self.weight[ids]


class RMSNorm(Module):
    """Root mean square normalization with a learned gain."""

    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return rms_norm(x, self.gain)


class FeedForward(Module):
    """Two affine maps with a GELU in between."""

    def __init__(self, dim: int, hidden_dim: int, rng: np.random.Generator):
        self.expand = Linear(dim, hidden_dim, rng)
        self.project = Linear(hidden_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(gelu(self.expand(x)))


class Attention(Module):
    """Projection weights of a multi-head attention block.

    Args:
        dim: Model width ``d``; must be divisible by ``heads``.
        heads: Number of heads.
        rng: Random generator used for initialization.
        dropout_rate: Dropout applied to the attention weights in training.
        dropout_rng: Random generator used for dropout masks.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        dropout_rate: float = 0.0,
        dropout_rng: np.random.Generator | None = None,
    ):
        if dim % heads:
            raise ShapeError(f"width {dim} is not divisible by {heads} heads")
        self.w_q = uniform_init(rng, dim, dim)
        self.w_k = uniform_init(rng, dim, dim)
        self.w_v = uniform_init(rng, dim, dim)
        self.w_o = uniform_init(rng, dim, dim)
        self.heads = heads
        self.dropout_rate = dropout_rate
        self.dropout_rng = dropout_rng

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(self.w_q, self.w_k, self.w_v, self.w_o, self.heads)


class Sublayer(Module):
    """A residual sublayer followed by RMS normalization.

    For self-attention and feed-forward kinds the output is
    ``RMSNorm(Y + inner(Y))``. The cross-attention kinds take a memory ``X``
    and compute ``RMSNorm(Y + inner(X, Y))`` with queries from ``Y``.

    Args:
        kind: The inner function.
        dim: Model width.
        heads: Number of attention heads.
        rng: Random generator used for initialization.
        ffw_dim: Hidden width of the feed-forward network.
        causal: Whether self-attention is masked to earlier positions.
        dropout_rate: Attention-weight dropout of cross-attention kinds.
        dropout_rng: Random generator used for dropout masks.
        chunk_size: Chunk size of the chunked cross-attention kind.
        first_chunk_mode: First-chunk behaviour of chunked cross-attention.
    """

    def __init__(
        self,
        kind: SublayerKind,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        ffw_dim: int | None = None,
        causal: bool = False,
        dropout_rate: float = 0.0,
        dropout_rng: np.random.Generator | None = None,
        chunk_size: int | None = None,
        first_chunk_mode: FirstChunkMode | str = FirstChunkMode.IDENTITY,
    ):
        self.kind = SublayerKind(kind)
        if self.kind is SublayerKind.FFW:
            self.inner = FeedForward(dim, ffw_dim or 4 * dim, rng)
        else:
            rate = dropout_rate if self.kind in (SublayerKind.CA, SublayerKind.CCA) else 0.0
            self.inner = Attention(dim, heads, rng, rate, dropout_rng)
        self.norm = RMSNorm(dim)
        self.causal = causal
        self.chunk_size = chunk_size
        self.first_chunk_mode = FirstChunkMode(first_chunk_mode)
        if self.kind is SublayerKind.CCA and not chunk_size:
            raise ValueError("chunked cross-attention needs a chunk size")

    def __call__(
        self,
        primary: Tensor,
        secondary: Tensor | Mapping[int, Tensor | None] | None = None,
        positions: Sequence[int] | None = None,
        return_weights: bool = False,
    ) -> Tensor | tuple[Tensor, Tensor]:
        """Applies the sublayer.

        Args:
            primary: The residual input ``Y``; queries are taken from it.
            secondary: The memory ``X`` of a cross-attention kind. For the
                chunked kind, a mapping from 1-based chunk index to neighbour
                encoding.
            positions: Rotary positions of the self-attention kind.
            return_weights: Whether to also return the head-averaged attention
                weights (cross-attention kind only).

        Returns:
            The normalized output, same shape as ``primary``, and the attention
            weights if requested.
        """
        weights = None
        if self.kind is SublayerKind.FFW:
            inner = self.inner(primary)
        elif self.kind is SublayerKind.SA:
            inner = multi_head_attention(
                primary,
                primary,
                self.inner.params,
                causal_mask=self.causal,
                rotary=True,
                q_positions=positions,
                kv_positions=positions,
            )
        elif secondary is None:
            raise MissingInputError(f"{self.kind.name} sublayer needs a secondary input")
        elif self.kind is SublayerKind.CA:
            inner = multi_head_attention(
                primary,
                secondary,
                self.inner.params,
                dropout_rate=self.inner.dropout_rate,
                rng=self.inner.dropout_rng,
                training=self.training,
                return_weights=return_weights,
            )
            if return_weights:
                inner, weights = inner
        else:
            inner = chunked_cross_attention(
                primary,
                secondary,
                self.chunk_size,
                self.first_chunk_mode,
                self.inner.params,
                dropout_rate=self.inner.dropout_rate,
                rng=self.inner.dropout_rng,
                training=self.training,
            )

        out = self.norm(primary + inner)
        if return_weights:
            return out, weights
        return out
