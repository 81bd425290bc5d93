"""Spatial-temporal object graph: softmax affinity adjacency over all
object rows of a clip, plus a two-layer residual GCN. The appearance and
motion branches each own an independent parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import init_linear


@dataclass
class GraphBranchParams:
    w1: Tensor  # affinity projections, d x d
    w2: Tensor
    w3: Tensor  # GCN layer weights, d x d
    w4: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d: int) -> "GraphBranchParams":
        mats = [init_linear(rng, d, d)[0] for _ in range(4)]
        return cls(*mats,
                   ln_gain=Tensor(np.ones(d), requires_grad=True),
                   ln_bias=Tensor(np.zeros(d), requires_grad=True))

    def named(self, prefix: str):
        for field in ("w1", "w2", "w3", "w4", "ln_gain", "ln_bias"):
            yield f"{prefix}.{field}", getattr(self, field)


def build_adjacency(F: Tensor, params: GraphBranchParams) -> Tensor:
    """Row-stochastic affinity matrix: row-softmax of (F W1)(F W2)^T."""
    scores = ad.matmul(ad.matmul(F, params.w1), ad.transpose(ad.matmul(F, params.w2)))
    A = ad.softmax_rows(scores)
    assert np.abs(A.data.sum(axis=1) - 1.0).max() < 1e-9
    return A


def gcn_forward(F: Tensor, params: GraphBranchParams) -> Tensor:
    """Two-layer graph convolution with residual connection and layer norm.

    The adjacency is rebuilt from the current features on every call and
    both layers propagate through the same matrix.
    """
    A = build_adjacency(F, params)
    h = ad.relu(ad.matmul(ad.matmul(A, F), params.w3))
    h = ad.relu(ad.matmul(ad.matmul(A, h), params.w4))
    return ad.layer_norm(F + h, params.ln_gain, params.ln_bias)
