"""Appearance-motion association: stack both branches, enhance the stack
with three parameter-free dot-product attentions, average, then pool the
object rows of each frame into a unit-norm frame vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


@dataclass
class FusionParams:
    """Layer-norm affines for the three enhancement paths; the attention
    itself has no learnable parameters."""

    ln_a_gain: Tensor
    ln_a_bias: Tensor
    ln_m_gain: Tensor
    ln_m_bias: Tensor
    ln_j_gain: Tensor
    ln_j_bias: Tensor

    @classmethod
    def create(cls, d: int) -> "FusionParams":
        def gain():
            return Tensor(np.ones(d), requires_grad=True)

        def bias():
            return Tensor(np.zeros(d), requires_grad=True)

        return cls(gain(), bias(), gain(), bias(), gain(), bias())

    def named(self, prefix: str = "fusion"):
        for field in ("ln_a_gain", "ln_a_bias", "ln_m_gain",
                      "ln_m_bias", "ln_j_gain", "ln_j_bias"):
            yield f"{prefix}.{field}", getattr(self, field)


@dataclass
class FusedSequence:
    """Fused per-frame features (unit L2 norm rows) plus, for each frame,
    the indices of the stacked object rows that were pooled into it."""

    X: Tensor  # (T, d)
    provenance: list[list[int]]


def dot_product_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with row-wise softmax."""
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"query/key widths differ: {Q.shape} vs {K.shape}")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"key/value row counts differ: {K.shape} vs {V.shape}")
    d = Q.shape[1]
    scores = ad.matmul(Q, ad.transpose(K)) * (1.0 / np.sqrt(d))
    return ad.matmul(ad.softmax_rows(scores), V)


def enhanced_stack(F_a: Tensor, F_m: Tensor, params: FusionParams):
    """The stacked tensor and its three attention-enhanced variants."""
    U = ad.concat_rows([F_a, F_m])
    X_a = ad.layer_norm(U + dot_product_attention(U, F_a, F_a),
                        params.ln_a_gain, params.ln_a_bias)
    X_m = ad.layer_norm(U + dot_product_attention(U, F_m, F_m),
                        params.ln_m_gain, params.ln_m_bias)
    X_j = ad.layer_norm(U + dot_product_attention(U, U, U),
                        params.ln_j_gain, params.ln_j_bias)
    return U, X_a, X_m, X_j


def fuse(F_a: Tensor, F_m: Tensor, objects_per_frame: int,
         params: FusionParams) -> FusedSequence:
    """Fuse the two enhanced branches into per-frame unit-norm vectors.

    Both inputs are (T*S) x d. The stacked 2(T*S) x d tensor is enhanced
    three ways (keys/values from the appearance branch, the motion branch,
    and the stack itself), the three results are averaged elementwise, and
    the 2S rows belonging to each frame are mean-pooled and L2-normalized.
    """
    if F_a.shape != F_m.shape:
        raise ShapeError(f"branch shapes differ: {F_a.shape} vs {F_m.shape}")
    N, d = F_a.shape
    S = objects_per_frame
    if S < 1 or N % S != 0:
        raise ContractError(f"row count {N} is not divisible by objects_per_frame={S}")
    T = N // S

    _U, X_a, X_m, X_j = enhanced_stack(F_a, F_m, params)
    avg = (X_a + X_m + X_j) * (1.0 / 3.0)

    # frame t pools its S appearance rows and S motion rows from the stack
    pool = np.zeros((T, 2 * N))
    provenance = []
    for t in range(T):
        rows = list(range(t * S, (t + 1) * S)) + list(range(N + t * S, N + (t + 1) * S))
        pool[t, rows] = 1.0 / (2 * S)
        provenance.append(rows)
    X = ad.l2_normalize_rows(ad.matmul(Tensor(pool), avg))
    assert np.abs((X.data ** 2).sum(axis=1) - 1.0).max() < 1e-9
    return FusedSequence(X=X, provenance=provenance)
