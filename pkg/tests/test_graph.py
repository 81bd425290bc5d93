"""Object graph: adjacency stochasticity, permutation equivariance,
residual passthrough, and gradients."""

import numpy as np

from oodaction import autodiff as ad
from oodaction.autodiff import Tape, Tensor
from oodaction.graph import GraphBranchParams, build_adjacency, gcn_forward

from util import max_rel_err, numeric_grad


def params_for(rng, d):
    return GraphBranchParams.create(rng, d)


class TestAdjacency:
    def test_single_node(self):
        rng = np.random.default_rng(0)
        A = build_adjacency(Tensor(rng.normal(size=(1, 4))), params_for(rng, 4))
        np.testing.assert_array_equal(A.data, [[1.0]])

    def test_zero_weights_uniform(self):
        rng = np.random.default_rng(1)
        params = params_for(rng, 4)
        params.w1.data = np.zeros((4, 4))
        params.w2.data = np.zeros((4, 4))
        A = build_adjacency(Tensor(rng.normal(size=(5, 4))), params)
        np.testing.assert_allclose(A.data, 1.0 / 5.0)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(2)
        for n in (1, 4, 12):
            A = build_adjacency(Tensor(rng.normal(size=(n, 6))), params_for(rng, 6))
            np.testing.assert_allclose(A.data.sum(axis=1), 1.0, atol=1e-9)
            assert (A.data > 0).all() and (A.data < 1.0 + 1e-12).all()

    def test_permutation_conjugates_adjacency(self):
        rng = np.random.default_rng(3)
        params = params_for(rng, 5)
        F = rng.normal(size=(6, 5))
        perm = rng.permutation(6)
        A = build_adjacency(Tensor(F), params).data
        A_p = build_adjacency(Tensor(F[perm]), params).data
        np.testing.assert_allclose(A_p, A[perm][:, perm], atol=1e-12)


class TestGcnForward:
    def test_zero_w3_residual_passthrough(self):
        rng = np.random.default_rng(4)
        params = params_for(rng, 6)
        params.w3.data = np.zeros((6, 6))
        F = Tensor(rng.normal(size=(5, 6)))
        out = gcn_forward(F, params)
        expected = ad.layer_norm(F, params.ln_gain, params.ln_bias)
        np.testing.assert_allclose(out.data, expected.data, atol=1e-9)

    def test_zero_w4_residual_passthrough(self):
        rng = np.random.default_rng(5)
        params = params_for(rng, 6)
        params.w4.data = np.zeros((6, 6))
        F = Tensor(rng.normal(size=(5, 6)))
        out = gcn_forward(F, params)
        expected = ad.layer_norm(F, params.ln_gain, params.ln_bias)
        np.testing.assert_allclose(out.data, expected.data, atol=1e-9)

    def test_shape_preserved(self):
        rng = np.random.default_rng(6)
        params = params_for(rng, 8)
        for n in (1, 4, 12):
            F = Tensor(rng.normal(size=(n, 8)))
            assert gcn_forward(F, params).shape == (n, 8)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        params = params_for(rng, 8)
        F = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        out = gcn_forward(Tensor(F), params).data
        out_p = gcn_forward(Tensor(F[perm]), params).data
        assert np.abs(out_p - out[perm]).max() < 1e-9

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        params = params_for(rng, 8)
        F0 = rng.normal(size=(6, 8))
        mix = rng.normal(size=(6, 8))

        def tensor_fn(F):
            return (gcn_forward(F, params) * Tensor(mix)).sum()

        F = Tensor(F0, requires_grad=True)
        with Tape():
            loss = tensor_fn(F)
        ad.backward(loss)

        numeric = numeric_grad(lambda x: tensor_fn(Tensor(x)).item(), F0.copy())
        assert max_rel_err(F.grad, numeric, floor=1e-4) < 1e-4

        with Tape():
            loss = tensor_fn(Tensor(F0))
        grads = ad.backward(loss)
        for name, p in params.named("g"):
            analytic = grads.get(id(p), np.zeros_like(p.data))

            def plain(x, p=p):
                orig = p.data
                p.data = x
                try:
                    return tensor_fn(Tensor(F0)).item()
                finally:
                    p.data = orig

            numeric = numeric_grad(plain, p.data.copy())
            assert max_rel_err(analytic, numeric, floor=1e-4) < 1e-4, name
