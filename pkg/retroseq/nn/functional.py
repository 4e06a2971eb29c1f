"""Stateless transformer building blocks.

The functions in this module operate on :obj:`retroseq.tensor.engine.Tensor`
values and record their operations on the gradient tape. Parameters are passed
in explicitly; the module classes in :mod:`retroseq.nn.layers` hold them.
"""
from __future__ import annotations

import math
from collections import namedtuple
from collections.abc import Mapping, Sequence
from enum import Enum

import numpy as np

from retroseq.tensor.engine import (
    ShapeError,
    Tensor,
    concat,
    dropout,
    get_default_dtype,
    matmul,
)
from retroseq.util import RetroSeqError

ROTARY_BASE = 10000.0
RMS_EPS = 1e-6
MASK_VALUE = -1e30

AttentionParams = namedtuple("AttentionParams", ["w_q", "w_k", "w_v", "w_o", "heads"])
AttentionParams.__doc__ = """Weights of one multi-head attention block.

Each projection is a ``(d, d)`` matrix; head ``i`` uses columns
``i * d / heads`` to ``(i + 1) * d / heads`` of the query, key and value
projections.
"""


class SublayerKind(Enum):
    """The kind of inner function wrapped by a residual sublayer."""

    FFW = "ffw"
    SA = "sa"
    CA = "ca"
    CCA = "cca"


class FirstChunkMode(Enum):
    """How chunked cross-attention treats the first decoder chunk."""

    IDENTITY = "identity"
    HYBRID = "hybrid"


class MissingNeighboursError(RetroSeqError, KeyError):
    """Raised when a neighbour encoding required by a chunk is absent."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Root mean square normalization along the last axis.

    Args:
        x: The input.
        gain: Per-feature gain, with length equal to the last axis of ``x``.
        eps: Added to the mean square before the square root.

    Returns:
        ``gain * x / sqrt(mean(x ** 2) + eps)``.
    """
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"gain shape {gain.shape} does not match input shape {x.shape}")
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps).sqrt()
    return x / scale * gain


def _rotary_tables(positions: Sequence[int] | np.ndarray, width: int):
    positions = np.asarray(positions, dtype=np.float64)
    frequencies = ROTARY_BASE ** (-2.0 * np.arange(width // 2) / width)
    angles = positions[:, None] * frequencies[None, :]
    dtype = get_default_dtype()
    cos = np.repeat(np.cos(angles), 2, axis=-1).astype(dtype)
    sin = np.repeat(np.sin(angles), 2, axis=-1).astype(dtype)
    return cos, sin


def rotary_apply(x: Tensor, positions: Sequence[int] | np.ndarray) -> Tensor:
    """Rotates consecutive coordinate pairs by position-dependent angles.

    Pair ``(2j, 2j + 1)`` at position ``pos`` is rotated by
    ``pos * 10000 ** (-2j / width)``.

    Args:
        x: Per-head vectors with shape ``(..., length, width)``.
        positions: One non-negative position per row of ``x``.

    Returns:
        The rotated vectors, same shape as ``x``.
    """
    width = x.shape[-1]
    if width % 2:
        raise ShapeError(f"rotary embedding needs an even head width, got {width}")
    if len(positions) != x.shape[-2]:
        raise ShapeError(f"{len(positions)} positions given for {x.shape[-2]} rows")

    cos, sin = _rotary_tables(positions, width)
    # (x0, x1) -> (-x1, x0) for every pair
    swap = np.arange(width).reshape(-1, 2)[:, ::-1].reshape(-1)
    sign = np.tile(np.array([-1.0, 1.0], dtype=cos.dtype), width // 2)
    rotated = x[..., swap] * sign
    return x * cos + rotated * sin


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, width = x.shape
    return x.reshape(*lead, length, heads, width // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, head_width = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * head_width)


def build_causal_mask(query_length: int, key_length: int | None = None) -> np.ndarray:
    """Gets a boolean mask that is true where a query may not see a key."""
    key_length = query_length if key_length is None else key_length
    return np.triu(np.ones((query_length, key_length), dtype=bool), k=1)


def multi_head_attention(
    q_src: Tensor,
    kv_src: Tensor,
    params: AttentionParams,
    causal_mask: bool | np.ndarray = False,
    rotary: bool = False,
    q_positions: Sequence[int] | None = None,
    kv_positions: Sequence[int] | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    return_weights: bool = False,
) -> Tensor | tuple[Tensor, Tensor]:
    """Scaled dot-product attention over several heads.

    Args:
        q_src: Query source, shape ``(..., Lq, d)``.
        kv_src: Key and value source, shape ``(..., Lk, d)``.
        params: The projection weights.
        causal_mask: ``True`` to stop query ``t`` attending to keys after
            ``t``, or an explicit boolean mask that is true where attention is
            forbidden.
        rotary: Whether to rotate queries and keys by their positions.
        q_positions: Query positions, defaults to ``0 .. Lq - 1``.
        kv_positions: Key positions, defaults to ``0 .. Lk - 1``.
        dropout_rate: Dropout applied to the attention weights in training.
        rng: Random generator for dropout.
        training: Whether dropout is active.
        return_weights: Whether to also return the head-averaged attention
            weights (before dropout), shape ``(..., Lq, Lk)``.

    Returns:
        The attended values, shape ``(..., Lq, d)``, and optionally the
        attention weights.
    """
    d = params.w_q.shape[0]
    if q_src.shape[-1] != d or kv_src.shape[-1] != d:
        raise ShapeError(
            f"attention width {d} does not match inputs {q_src.shape} and {kv_src.shape}"
        )
    if d % params.heads:
        raise ShapeError(f"width {d} is not divisible by {params.heads} heads")

    q = _split_heads(matmul(q_src, params.w_q), params.heads)
    k = _split_heads(matmul(kv_src, params.w_k), params.heads)
    v = _split_heads(matmul(kv_src, params.w_v), params.heads)
    q_length, k_length = q_src.shape[-2], kv_src.shape[-2]

    if rotary:
        q_positions = range(q_length) if q_positions is None else q_positions
        kv_positions = range(k_length) if kv_positions is None else kv_positions
        q = rotary_apply(q, q_positions)
        k = rotary_apply(k, kv_positions)

    logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // params.heads))
    if causal_mask is True:
        logits = logits.masked_fill(build_causal_mask(q_length, k_length), MASK_VALUE)
    elif isinstance(causal_mask, np.ndarray):
        logits = logits.masked_fill(causal_mask, MASK_VALUE)

    weights = logits.softmax(-1)
    attended = matmul(dropout(weights, dropout_rate, rng, training), v)
    out = matmul(_merge_heads(attended), params.w_o)
    if return_weights:
        return out, weights.mean(axis=-3)
    return out


def chunked_cross_attention(
    states: Tensor,
    neighbour_encodings: Mapping[int, Tensor | None],
    chunk_size: int,
    first_chunk_mode: FirstChunkMode | str,
    params: AttentionParams,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Cross-attention of each decoder chunk against its neighbour encodings.

    Chunk ``u`` (1-based) holds positions ``(u - 1) * m`` to ``u * m - 1``.
    The encoding for chunk ``u >= 2`` comes from neighbours retrieved with the
    tokens of chunk ``u - 1``, so every output depends only on earlier or
    same-chunk positions. Chunk 1 passes through unchanged in identity mode.

    Args:
        states: Decoder states, shape ``(L, d)``.
        neighbour_encodings: Encodings keyed by 1-based chunk index, each of
            shape ``(k * 2m, d)``. ``None`` or an encoding with no rows makes
            that chunk pass through unchanged.
        chunk_size: The chunk size ``m``.
        first_chunk_mode: Whether chunk 1 is the identity or attends to the
            intent-keyed (hybrid) encoding.
        params: The attention weights.
        dropout_rate: Dropout applied to the attention weights in training.
        rng: Random generator for dropout.
        training: Whether dropout is active.

    Returns:
        The per-position outputs, shape ``(L, d)``.
    """
    first_chunk_mode = FirstChunkMode(first_chunk_mode)
    length = states.shape[0]
    if length < 1:
        raise ShapeError("chunked cross-attention needs at least one position")
    if chunk_size < 1:
        raise ValueError(f"chunk size must be positive, got {chunk_size}")

    pieces = []
    n_chunks = -(-length // chunk_size)
    for u in range(1, n_chunks + 1):
        rows = states[(u - 1) * chunk_size : min(u * chunk_size, length)]
        if u == 1 and first_chunk_mode is FirstChunkMode.IDENTITY:
            pieces.append(rows)
            continue
        if u not in neighbour_encodings:
            raise MissingNeighboursError(f"no neighbour encoding for chunk {u}")
        encoding = neighbour_encodings[u]
        if encoding is None or encoding.shape[0] == 0:
            pieces.append(rows)
            continue
        pieces.append(
            multi_head_attention(
                rows,
                encoding,
                params,
                dropout_rate=dropout_rate,
                rng=rng,
                training=training,
            )
        )
    return concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]


def gelu(x: Tensor) -> Tensor:
    """The tanh approximation of the Gaussian error linear unit."""
    inner = (x + x * x * x * 0.044715) * math.sqrt(2.0 / math.pi)
    return x * (inner.tanh() + 1.0) * 0.5
