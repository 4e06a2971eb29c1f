from __future__ import annotations

import math

import numpy as np
import pytest
from pytest import approx

from retroseq.nn.functional import (
    AttentionParams,
    MissingNeighboursError,
    chunked_cross_attention,
    multi_head_attention,
    rms_norm,
    rotary_apply,
)
from retroseq.tensor.engine import ShapeError, Tensor, precision
from retroseq.tests import RetroSeqTest


def random_params(rng: np.random.Generator, d: int, heads: int, requires_grad=False):
    return AttentionParams(
        *(Tensor(rng.normal(0, 0.5, size=(d, d)), requires_grad=requires_grad) for _ in range(4)),
        heads,
    )


def rotate(vector: np.ndarray, position: int) -> np.ndarray:
    out = vector.copy()
    width = len(vector)
    for j in range(width // 2):
        theta = position * 10000 ** (-2 * j / width)
        x0, x1 = vector[2 * j], vector[2 * j + 1]
        out[2 * j] = x0 * math.cos(theta) - x1 * math.sin(theta)
        out[2 * j + 1] = x1 * math.cos(theta) + x0 * math.sin(theta)
    return out


def loop_attention(q_src, kv_src, params, causal=False, rotary=False):
    """Per-position, per-head reference attention."""
    w_q, w_k, w_v, w_o = (p.data for p in params[:4])
    d = w_q.shape[0]
    dh = d // params.heads
    out = np.zeros((q_src.shape[0], d))
    for t in range(q_src.shape[0]):
        heads = []
        for h in range(params.heads):
            cols = slice(h * dh, (h + 1) * dh)
            q = q_src[t] @ w_q[:, cols]
            if rotary:
                q = rotate(q, t)
            limit = t + 1 if causal else kv_src.shape[0]
            scores = []
            for j in range(limit):
                k = kv_src[j] @ w_k[:, cols]
                if rotary:
                    k = rotate(k, j)
                scores.append(q @ k / math.sqrt(dh))
            scores = np.exp(np.array(scores) - max(scores))
            scores /= scores.sum()
            value = sum(s * (kv_src[j] @ w_v[:, cols]) for j, s in enumerate(scores))
            heads.append(value)
        out[t] = np.concatenate(heads) @ w_o
    return out


class TestRMSNorm(RetroSeqTest):
    """Class to test RMS normalization."""

    def test_rms_norm(self):
        out = rms_norm(Tensor([1.0, 1.0, 1.0, 1.0]), Tensor(np.ones(4)))
        np.testing.assert_allclose(out.data, [1, 1, 1, 1], rtol=1e-6)

        out = rms_norm(Tensor([3.0, 3.0]), Tensor(np.ones(2)))
        np.testing.assert_allclose(out.data, [1, 1], rtol=1e-6)

        rng = self.get_rng()
        with precision(np.float64):
            x = rng.normal(size=(3, 5))
            gain = rng.normal(size=5)
            out = rms_norm(Tensor(x), Tensor(gain)).data
        expected = gain * x / np.sqrt((x**2).mean(-1, keepdims=True) + 1e-6)
        np.testing.assert_allclose(out, expected, rtol=1e-6)

    def test_scale_invariance(self):
        rng = self.get_rng()
        x = rng.normal(size=(4, 8))
        gain = Tensor(np.ones(8))
        base = rms_norm(Tensor(x), gain).data
        for alpha in (2, 10, 100):
            np.testing.assert_allclose(rms_norm(Tensor(alpha * x), gain).data, base, atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))

    def test_gradients(self):
        rng = self.get_rng(3)
        for instance in range(100):
            with precision(np.float64):
                params = {
                    "x": Tensor(rng.normal(size=(3, 6)), requires_grad=True),
                    "gain": Tensor(rng.normal(size=6), requires_grad=True),
                }
                weights = Tensor(rng.normal(size=(3, 6)))
                self.assert_gradients_match(
                    lambda: (rms_norm(params["x"], params["gain"]) * weights).sum(),
                    params,
                    seed=instance,
                )


class TestRotary(RetroSeqTest):
    """Class to test rotary position embeddings."""

    def setUp(self):
        self.rng = self.get_rng(5)

    def test_position_zero_is_identity(self):
        x = Tensor(self.rng.normal(size=(3, 8)))
        out = rotary_apply(x, [0, 0, 0])
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    def test_pair_norms_preserved(self):
        with precision(np.float64):
            x = Tensor(self.rng.normal(size=(2, 5, 8)))
            out = rotary_apply(x, [0, 3, 7, 11, 100]).data
        before = np.linalg.norm(x.data.reshape(2, 5, 4, 2), axis=-1)
        after = np.linalg.norm(out.reshape(2, 5, 4, 2), axis=-1)
        np.testing.assert_allclose(after, before, rtol=1e-6)

    def test_matches_explicit_rotation(self):
        with precision(np.float64):
            x = self.rng.normal(size=(4, 6))
            out = rotary_apply(Tensor(x), [0, 1, 5, 9]).data
        for row, position in enumerate([0, 1, 5, 9]):
            np.testing.assert_allclose(out[row], rotate(x[row], position), rtol=1e-9)

    def test_relative_position(self):
        with precision(np.float64):
            for _ in range(20):
                q = Tensor(self.rng.normal(size=(1, 16)))
                k = Tensor(self.rng.normal(size=(1, 16)))
                p1, p2, shift = self.rng.integers(0, 50, size=3)
                before = (rotary_apply(q, [p1]).data * rotary_apply(k, [p2]).data).sum()
                after = (
                    rotary_apply(q, [p1 + shift]).data * rotary_apply(k, [p2 + shift]).data
                ).sum()
                assert after == approx(before, rel=1e-5, abs=1e-8)

    def test_odd_width(self):
        with pytest.raises(ShapeError):
            rotary_apply(Tensor(np.ones((2, 5))), [0, 1])


class TestMultiHeadAttention(RetroSeqTest):
    """Class to test multi-head attention."""

    def setUp(self):
        self.rng = self.get_rng(7)

    def test_single_key(self):
        with precision(np.float64):
            params = random_params(self.rng, 8, 2)
            queries = Tensor(self.rng.normal(size=(5, 8)))
            memory = Tensor(self.rng.normal(size=(1, 8)))
            out = multi_head_attention(queries, memory, params).data
        expected = memory.data @ params.w_v.data @ params.w_o.data
        for row in out:
            np.testing.assert_allclose(row, expected[0], rtol=1e-9)

    def test_causal_mask(self):
        params = random_params(self.rng, 8, 2)
        x = self.rng.normal(size=(6, 8))
        base = multi_head_attention(Tensor(x), Tensor(x), params, causal_mask=True, rotary=True)
        for t in range(5):
            perturbed = x.copy()
            perturbed[t + 1 :] += self.rng.normal(size=perturbed[t + 1 :].shape)
            out = multi_head_attention(
                Tensor(perturbed), Tensor(perturbed), params, causal_mask=True, rotary=True
            )
            assert np.array_equal(out.data[: t + 1], base.data[: t + 1])

    def test_loop_oracle(self):
        with precision(np.float64):
            for causal, rotary in [(False, False), (True, True), (False, True)]:
                params = random_params(self.rng, 8, 4)
                q_src = self.rng.normal(size=(5, 8))
                kv_src = q_src if causal else self.rng.normal(size=(7, 8))
                out = multi_head_attention(
                    Tensor(q_src), Tensor(kv_src), params, causal_mask=causal, rotary=rotary
                ).data
                expected = loop_attention(q_src, kv_src, params, causal, rotary)
                np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-10)

    def test_batched_matches_unbatched(self):
        with precision(np.float64):
            params = random_params(self.rng, 8, 2)
            x = self.rng.normal(size=(3, 4, 8))
            batched = multi_head_attention(Tensor(x), Tensor(x), params, rotary=True).data
            for i in range(3):
                single = multi_head_attention(Tensor(x[i]), Tensor(x[i]), params, rotary=True)
                np.testing.assert_allclose(batched[i], single.data, rtol=1e-9)

    def test_returned_weights(self):
        params = random_params(self.rng, 8, 2)
        _, weights = multi_head_attention(
            Tensor(self.rng.normal(size=(3, 8))),
            Tensor(self.rng.normal(size=(5, 8))),
            params,
            return_weights=True,
        )
        assert weights.shape == (3, 5)
        np.testing.assert_allclose(weights.data.sum(-1), 1.0, rtol=1e-5)

    def test_width_mismatch(self):
        params = random_params(self.rng, 8, 2)
        with pytest.raises(ShapeError):
            multi_head_attention(Tensor(np.ones((2, 6))), Tensor(np.ones((2, 8))), params)

    def test_gradients(self):
        for instance in range(100):
            with precision(np.float64):
                params = random_params(self.rng, 8, 2, requires_grad=True)
                x = Tensor(self.rng.normal(size=(4, 8)), requires_grad=True)
                memory = Tensor(self.rng.normal(size=(3, 8)), requires_grad=True)
                weights = Tensor(self.rng.normal(size=(4, 8)))
                named = {"w_q": params.w_q, "w_k": params.w_k, "w_v": params.w_v,
                         "w_o": params.w_o, "x": x, "memory": memory}

                def loss_fn():
                    self_attended = multi_head_attention(
                        x, x, params, causal_mask=True, rotary=True
                    )
                    return ((multi_head_attention(self_attended, memory, params)) * weights).sum()

                self.assert_gradients_match(loss_fn, named, max_coordinates=8, seed=instance)


class TestChunkedCrossAttention(RetroSeqTest):
    """Class to test chunked cross-attention."""

    def setUp(self):
        self.rng = self.get_rng(11)
        self.d, self.m, self.k = 8, 4, 2

    def get_encodings(self, n_chunks, first=False):
        start = 1 if first else 2
        return {
            u: Tensor(self.rng.normal(size=(self.k * 2 * self.m, self.d)))
            for u in range(start, n_chunks + 1)
        }

    def test_identity_first_chunk(self):
        params = random_params(self.rng, self.d, 2)
        states = Tensor(self.rng.normal(size=(12, self.d)))
        out = chunked_cross_attention(states, self.get_encodings(3), self.m, "identity", params)
        assert np.array_equal(out.data[: self.m], states.data[: self.m])
        assert not np.allclose(out.data[self.m :], states.data[self.m :])

    def test_hybrid_first_chunk(self):
        params = random_params(self.rng, self.d, 2)
        states = Tensor(self.rng.normal(size=(6, self.d)))
        encodings = self.get_encodings(2, first=True)
        out = chunked_cross_attention(states, encodings, self.m, "hybrid", params)
        expected = multi_head_attention(states[: self.m], encodings[1], params)
        np.testing.assert_allclose(out.data[: self.m], expected.data, rtol=1e-6)

    def test_missing_encoding(self):
        params = random_params(self.rng, self.d, 2)
        states = Tensor(self.rng.normal(size=(9, self.d)))
        with pytest.raises(MissingNeighboursError, match="chunk 3"):
            chunked_cross_attention(states, self.get_encodings(2), self.m, "identity", params)
        with pytest.raises(MissingNeighboursError, match="chunk 1"):
            chunked_cross_attention(states, self.get_encodings(3), self.m, "hybrid", params)

    def test_empty_encoding_is_identity(self):
        params = random_params(self.rng, self.d, 2)
        states = Tensor(self.rng.normal(size=(8, self.d)))
        out = chunked_cross_attention(states, {2: None}, self.m, "identity", params)
        assert np.array_equal(out.data, states.data)

    def test_autoregressive(self):
        params = random_params(self.rng, self.d, 2)
        x = self.rng.normal(size=(12, self.d))
        encodings = self.get_encodings(3)
        base = chunked_cross_attention(Tensor(x), encodings, self.m, "identity", params).data
        for position in range(12):
            perturbed = x.copy()
            perturbed[position] += 1.0
            out = chunked_cross_attention(Tensor(perturbed), encodings, self.m, "identity", params)
            chunk_start = (position // self.m) * self.m
            assert np.array_equal(out.data[:chunk_start], base[:chunk_start])

    def test_loop_oracle(self):
        with precision(np.float64):
            params = random_params(self.rng, self.d, 2)
            states = self.rng.normal(size=(12, self.d))
            encodings = self.get_encodings(3)
            out = chunked_cross_attention(
                Tensor(states), encodings, self.m, "identity", params
            ).data

        for position in range(12):
            u = position // self.m + 1
            if u == 1:
                expected = states[position]
            else:
                expected = loop_attention(states[position : position + 1], encodings[u].data, params)[0]
            np.testing.assert_allclose(out[position], expected, rtol=1e-5, atol=1e-10)

    def test_partial_last_chunk(self):
        params = random_params(self.rng, self.d, 2)
        states = Tensor(self.rng.normal(size=(10, self.d)))
        out = chunked_cross_attention(states, self.get_encodings(3), self.m, "identity", params)
        assert out.shape == (10, self.d)

    def test_gradients(self):
        for instance in range(100):
            with precision(np.float64):
                params = random_params(self.rng, self.d, 2, requires_grad=True)
                states = Tensor(self.rng.normal(size=(7, self.d)), requires_grad=True)
                encoding = Tensor(self.rng.normal(size=(6, self.d)), requires_grad=True)
                weights = Tensor(self.rng.normal(size=(7, self.d)))
                named = {"w_q": params.w_q, "w_v": params.w_v, "states": states, "encoding": encoding}

                def loss_fn():
                    out = chunked_cross_attention(
                        states, {1: encoding, 2: encoding}, self.m, "hybrid", params
                    )
                    return (out * weights).sum()

                self.assert_gradients_match(loss_fn, named, max_coordinates=8, seed=instance)
