"""Attention fusion: degenerate attention cases, the full numpy oracle for
the enhancement/average/pool pipeline, norm invariants, and gradients."""

import numpy as np
import pytest

from oodaction import autodiff as ad
from oodaction.autodiff import Tape, Tensor
from oodaction.errors import ContractError
from oodaction.fusion import (FusionParams, dot_product_attention, enhanced_stack,
                              fuse)

from util import max_rel_err, numeric_grad


def np_softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def np_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def np_attention(Q, K, V):
    return np_softmax(Q @ K.T / np.sqrt(Q.shape[1])) @ V


def np_fuse(Fa, Fm, S):
    """Plain numpy re-derivation of the whole fusion pipeline
    (default layer-norm affines)."""
    N, d = Fa.shape
    T = N // S
    U = np.concatenate([Fa, Fm], axis=0)
    Xa = np_layer_norm(U + np_attention(U, Fa, Fa))
    Xm = np_layer_norm(U + np_attention(U, Fm, Fm))
    Xj = np_layer_norm(U + np_attention(U, U, U))
    avg = (Xa + Xm + Xj) / 3.0
    pooled = np.stack([
        avg[list(range(t * S, (t + 1) * S)) + list(range(N + t * S, N + (t + 1) * S))].mean(axis=0)
        for t in range(T)])
    return pooled / np.linalg.norm(pooled, axis=1, keepdims=True)


class TestDotProductAttention:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(0)
        Q = Tensor(rng.normal(size=(3, 4)))
        K = Tensor(rng.normal(size=(1, 4)))
        V = Tensor(rng.normal(size=(1, 4)))
        out = dot_product_attention(Q, K, V)
        np.testing.assert_allclose(out.data, np.repeat(V.data, 3, axis=0), atol=1e-12)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(1)
        Q = Tensor(rng.normal(size=(2, 4)))
        K = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
        V = Tensor(rng.normal(size=(5, 4)))
        out = dot_product_attention(Q, K, V)
        np.testing.assert_allclose(out.data, np.tile(V.data.mean(axis=0), (2, 1)), atol=1e-12)

    def test_matches_hand_composition(self):
        rng = np.random.default_rng(2)
        Q0, K0, V0 = rng.normal(size=(3, 8)), rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        out = dot_product_attention(Tensor(Q0), Tensor(K0), Tensor(V0))
        weights = np_softmax(Q0 @ K0.T / np.sqrt(8))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(out.data, weights @ V0, atol=1e-12)


class TestFuse:
    def test_equal_branches_make_equal_enhancements(self):
        rng = np.random.default_rng(3)
        F = Tensor(rng.normal(size=(6, 4)))
        params = FusionParams.create(4)
        _U, Xa, Xm, _Xj = enhanced_stack(F, F, params)
        np.testing.assert_array_equal(Xa.data, Xm.data)
        fused = fuse(F, F, 2, params)
        np.testing.assert_allclose((fused.X.data ** 2).sum(axis=1), 1.0, atol=1e-9)

    def test_single_object_single_frame(self):
        v = Tensor(np.array([[1.0, 2.0]]))
        fused = fuse(v, v, 1, FusionParams.create(2))
        assert fused.X.shape == (1, 2)
        assert np.linalg.norm(fused.X.data[0]) == pytest.approx(1.0, abs=1e-12)

    def test_matches_numpy_oracle(self):
        rng = np.random.default_rng(4)
        T, S, d = 4, 3, 8
        Fa = rng.normal(size=(T * S, d))
        Fm = rng.normal(size=(T * S, d))
        fused = fuse(Tensor(Fa), Tensor(Fm), S, FusionParams.create(d))
        np.testing.assert_allclose(fused.X.data, np_fuse(Fa, Fm, S), atol=1e-12)

    def test_pooling_provenance(self):
        rng = np.random.default_rng(5)
        T, S, d = 3, 2, 4
        Fa = Tensor(rng.normal(size=(T * S, d)))
        Fm = Tensor(rng.normal(size=(T * S, d)))
        params = FusionParams.create(d)
        fused = fuse(Fa, Fm, S, params)
        _U, Xa, Xm, Xj = enhanced_stack(Fa, Fm, params)
        avg = (Xa.data + Xm.data + Xj.data) / 3.0
        for t, rows in enumerate(fused.provenance):
            assert rows == [t * S, t * S + 1, T * S + t * S, T * S + t * S + 1]
            pooled = avg[rows].mean(axis=0)
            pooled /= np.linalg.norm(pooled)
            np.testing.assert_allclose(fused.X.data[t], pooled, atol=1e-12)

    def test_unit_norm_invariant(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            Fa = Tensor(rng.normal(size=(8, 6)))
            Fm = Tensor(rng.normal(size=(8, 6)))
            fused = fuse(Fa, Fm, 2, FusionParams.create(6))
            np.testing.assert_allclose((fused.X.data ** 2).sum(axis=1), 1.0, atol=1e-9)

    def test_swapping_branches_preserves_output(self):
        # X^a and X^m swap and X^joint row-blocks swap, so the pooled frame
        # vectors are identical
        rng = np.random.default_rng(7)
        Fa = Tensor(rng.normal(size=(6, 4)))
        Fm = Tensor(rng.normal(size=(6, 4)))
        params = FusionParams.create(4)
        ab = fuse(Fa, Fm, 2, params).X.data
        ba = fuse(Fm, Fa, 2, params).X.data
        np.testing.assert_allclose(ab, ba, atol=1e-12)

        N = 6
        _U, Xa, Xm, Xj = enhanced_stack(Fa, Fm, params)
        _U2, Xa2, _Xm2, Xj2 = enhanced_stack(Fm, Fa, params)
        swap = np.concatenate([np.arange(N, 2 * N), np.arange(N)])
        np.testing.assert_allclose(Xa2.data, Xm.data[swap], atol=1e-12)
        np.testing.assert_allclose(Xj2.data, Xj.data[swap], atol=1e-12)

    def test_indivisible_rows_rejected(self):
        F = Tensor(np.zeros((5, 3)) + 1.0)
        with pytest.raises(ContractError):
            fuse(F, F, 2, FusionParams.create(3))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        T, S, d = 3, 2, 8
        Fa0 = rng.normal(size=(T * S, d))
        Fm0 = rng.normal(size=(T * S, d))
        params = FusionParams.create(d)
        mix = rng.normal(size=(T, d))

        def tensor_fn(Fa):
            return (fuse(Fa, Tensor(Fm0), S, params).X * Tensor(mix)).sum()

        Fa = Tensor(Fa0, requires_grad=True)
        with Tape():
            loss = tensor_fn(Fa)
        ad.backward(loss)
        numeric = numeric_grad(lambda x: tensor_fn(Tensor(x)).item(), Fa0.copy())
        assert max_rel_err(Fa.grad, numeric, floor=1e-4) < 1e-4
