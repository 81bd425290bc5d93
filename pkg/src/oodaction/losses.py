"""Training objectives: cosine-affinity losses over frame pairs with hard
example mining, the Beta-evidence classification loss with its subjective
opinion mapping, boundary regression with temporal DIoU, and the weighted
final objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


@dataclass
class LossWeights:
    """Loss balance weights and decision thresholds.

    Defaults follow the best-performing settings reported for the method:
    gamma0=0.8, gamma1=0.15, gamma2=0.3, gamma3=0.2, tau_bb=0.3,
    tau_aa=0.4, tau_dif=0.4, a_tau=0.5, u_tau=0.6.
    """

    gamma0: float = 0.8
    gamma1: float = 0.15
    gamma2: float = 0.3
    gamma3: float = 0.2
    tau_bb: float = 0.3
    tau_aa: float = 0.4
    tau_dif: float = 0.4
    a_tau: float = 0.5
    u_tau: float = 0.6
    ohem_pairs: int = 64
    base_rate: float = 0.5

    def validate(self):
        for name in ("gamma0", "gamma1", "gamma2", "gamma3"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")
        for name in ("tau_bb", "tau_aa", "tau_dif", "a_tau", "u_tau", "base_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.ohem_pairs < 1:
            raise ContractError("ohem_pairs must be positive")


def _ohem_sum(hinge: Tensor, pair_mask: np.ndarray, budget: int) -> Tensor:
    """Sum the `budget` largest hinge values among the masked pairs.

    Selection is by forward value with deterministic tie-breaking on the
    flat pair index; gradients flow only through the selected entries.
    """
    if not pair_mask.any():
        return Tensor(0.0)
    flat_idx = np.flatnonzero(pair_mask)
    if flat_idx.size > budget:
        vals = hinge.data.ravel()[flat_idx]
        order = np.lexsort((flat_idx, -vals))
        flat_idx = flat_idx[order[:budget]]
    sel = np.zeros(hinge.shape)
    sel.ravel()[flat_idx] = 1.0
    return (hinge * Tensor(sel)).sum()


def affinity_loss(X: Tensor, action_mask, w: LossWeights):
    """Frame-pair affinity losses (background/action/mixed) and their mean.

    Pair membership comes from the ground-truth frame mask. Each term sums
    hinge violations over unordered frame pairs, restricted to the
    `w.ohem_pairs` hardest pairs. Terms with no eligible pairs contribute 0.
    """
    T = X.shape[0]
    if T < 2:
        raise ContractError("affinity loss requires at least two frames")
    mask = np.asarray(action_mask, dtype=bool)
    if mask.shape != (T,):
        raise ContractError(f"action mask length {mask.shape} does not match T={T}")

    Xn = ad.l2_normalize_rows(X)
    cos = ad.matmul(Xn, ad.transpose(Xn))
    upper = np.triu(np.ones((T, T), dtype=bool), k=1)
    bg = ~mask
    m_bb = (bg[:, None] & bg[None, :]) & upper
    m_aa = (mask[:, None] & mask[None, :]) & upper
    m_dif = (bg[:, None] ^ bg[None, :]) & upper

    l_bg = _ohem_sum(ad.relu(w.tau_bb - cos), m_bb, w.ohem_pairs)
    l_act = _ohem_sum(ad.relu(w.tau_aa - cos), m_aa, w.ohem_pairs)
    l_dif = _ohem_sum(ad.relu(cos - w.tau_dif), m_dif, w.ohem_pairs)
    l_abs = (l_bg + l_act + l_dif) * (1.0 / 3.0)
    return l_bg, l_act, l_dif, l_abs


# ---------------------------------------------------------------------------
# evidential classification


@dataclass
class Opinion:
    """Subjective-logic opinion derived from Beta evidence."""

    belief: float
    disbelief: float
    uncertainty: float
    base_rate: float
    expected_p: float


def evidence_to_opinion(alpha: float, beta: float, base_rate: float = 0.5) -> Opinion:
    """Map Beta parameters (alpha, beta >= 1) to a subjective opinion.

    belief + disbelief + uncertainty = 1 with belief = (alpha-1)/(alpha+beta),
    disbelief = (beta-1)/(alpha+beta), uncertainty = 2/(alpha+beta).
    """
    if alpha < 1.0 or beta < 1.0:
        raise ContractError(f"evidence parameters must be >= 1, got ({alpha}, {beta})")
    denom = alpha + beta
    b = (alpha - 1.0) / denom
    d = (beta - 1.0) / denom
    u = 2.0 / denom
    return Opinion(belief=b, disbelief=d, uncertainty=u, base_rate=base_rate,
                   expected_p=b + base_rate * u)


def opinion_arrays(alphas: np.ndarray, betas: np.ndarray, base_rate: float = 0.5):
    """Vectorized opinion fields (belief, disbelief, uncertainty, expected_p)."""
    if (alphas < 1.0).any() or (betas < 1.0).any():
        raise ContractError("evidence parameters must be >= 1")
    denom = alphas + betas
    b = (alphas - 1.0) / denom
    d = (betas - 1.0) / denom
    u = 2.0 / denom
    return b, d, u, b + base_rate * u


def beta_evidence_loss(alphas: Tensor, betas: Tensor, labels) -> Tensor:
    """Bayes risk of binary cross-entropy under per-class Beta evidence.

    (1/K) * sum over samples and classes of
        y * (psi(a+b) - psi(a)) + (1-y) * (psi(a+b) - psi(b)).
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != alphas.shape or y.shape != betas.shape:
        raise ContractError("labels must match the evidence shape")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be 0 or 1")
    if (alphas.data < 1.0).any() or (betas.data < 1.0).any():
        raise ContractError("evidence parameters must be >= 1")
    K = alphas.shape[1] if alphas.ndim == 2 else alphas.size
    psi_sum = ad.digamma(alphas + betas)
    pos = (psi_sum - ad.digamma(alphas)) * Tensor(y)
    neg = (psi_sum - ad.digamma(betas)) * Tensor(1.0 - y)
    return (pos + neg).sum() * (1.0 / K)


# ---------------------------------------------------------------------------
# localization


def temporal_diou(pred_start: Tensor, pred_end: Tensor, gt_spans: np.ndarray) -> Tensor:
    """1-D Distance-IoU between predicted spans and ground-truth spans.

    IoU minus squared center distance over squared enclosing length.
    Predicted lengths are clamped at zero so transiently inverted spans
    yield IoU 0 instead of propagating a negative union.
    """
    gs = Tensor(gt_spans[:, :1])
    ge = Tensor(gt_spans[:, 1:])
    inter = ad.relu(ad.minimum(pred_end, ge) - ad.maximum(pred_start, gs))
    union = ad.relu(pred_end - pred_start) + (ge - gs) - inter
    iou = ad.div(inter, union)
    center_gap = (pred_start + pred_end) * 0.5 - (gs + ge) * 0.5
    enclose = ad.maximum(pred_end, ge) - ad.minimum(pred_start, gs)
    return iou - ad.div(center_gap * center_gap, enclose * enclose)


def localization_loss(pred_offsets: Tensor, target_offsets: np.ndarray,
                      anchor_spans: np.ndarray, gt_spans: np.ndarray,
                      gamma0: float):
    """Smooth-L1 offset regression plus DIoU on the refined spans.

    Offsets are normalized by anchor length; the refined span is
    start + offset_s * scale, end + offset_e * scale. With no positive
    proposals all terms are zero.
    """
    n = anchor_spans.shape[0]
    if n == 0:
        zero = Tensor(0.0)
        return zero, zero, zero
    l_reg = ad.smooth_l1(pred_offsets - Tensor(target_offsets)).sum() * (1.0 / n)

    scales = (anchor_spans[:, 1] - anchor_spans[:, 0])[:, None].astype(np.float64)
    off_s = ad.slice_cols(pred_offsets, 0, 1)
    off_e = ad.slice_cols(pred_offsets, 1, 2)
    start = off_s * Tensor(scales) + Tensor(anchor_spans[:, :1].astype(np.float64))
    end = off_e * Tensor(scales) + Tensor(anchor_spans[:, 1:].astype(np.float64))
    diou = temporal_diou(start, end, gt_spans.astype(np.float64))
    l_diou = (1.0 - diou).sum() * (1.0 / n)
    return l_reg, l_diou, l_reg + gamma0 * l_diou


def final_loss(l_abs, l_beta, l_local, w: LossWeights) -> Tensor:
    """Weighted sum gamma1*L_ABS + gamma2*L_Beta + gamma3*L_Local."""
    return (ad.as_tensor(l_abs) * w.gamma1 + ad.as_tensor(l_beta) * w.gamma2
            + ad.as_tensor(l_local) * w.gamma3)


def actionness_bce(logits: Tensor, action_mask) -> Tensor:
    """Per-frame binary cross-entropy of the actionness head against the
    ground-truth mask, computed from logits for stability."""
    y = np.asarray(action_mask, dtype=np.float64).reshape(logits.shape)
    return (ad.softplus(logits) - ad.as_tensor(logits) * Tensor(y)).mean()


# ---------------------------------------------------------------------------
# anchor-to-segment assignment for training


def match_anchors(anchor_spans: np.ndarray, id_segments, pos_tiou: float = 0.5):
    """Assign anchors to ground-truth ID segments for supervision.

    An anchor is positive when its best tIoU reaches `pos_tiou` or when
    its center falls strictly inside a segment (so anchors nested in long
    actions still learn to expand onto the full span); each positive takes
    its highest-overlap eligible segment. Every segment additionally
    claims its single best-overlapping anchor if that anchor is still
    unassigned, so no segment goes unsupervised.

    Returns (anchor_indices, matched_spans, matched_labels, target_offsets)
    with offsets normalized by anchor length.
    """
    if len(id_segments) == 0 or anchor_spans.shape[0] == 0:
        empty = np.zeros((0,), dtype=int)
        return empty, np.zeros((0, 2)), empty, np.zeros((0, 2))
    spans = np.array([[s, e] for (s, e), _lab in id_segments], dtype=np.float64)
    labels = np.array([lab for _seg, lab in id_segments], dtype=int)
    a = anchor_spans.astype(np.float64)
    inter = np.maximum(0.0, np.minimum(a[:, None, 1], spans[None, :, 1])
                       - np.maximum(a[:, None, 0], spans[None, :, 0]))
    union = (a[:, 1] - a[:, 0])[:, None] + (spans[:, 1] - spans[:, 0])[None, :] - inter
    overlap = inter / union
    centers = (a[:, 0] + a[:, 1]) / 2.0
    inside = (centers[:, None] > spans[None, :, 0]) & (centers[:, None] < spans[None, :, 1])

    eligible = np.where((overlap >= pos_tiou) | inside, overlap, -1.0)
    assigned: dict[int, int] = {}
    best_gt = eligible.argmax(axis=1)
    best_val = eligible.max(axis=1)
    for i in np.flatnonzero(best_val >= 0.0):
        assigned[int(i)] = int(best_gt[i])
    for g in range(spans.shape[0]):
        i = int(overlap[:, g].argmax())
        if i not in assigned:
            assigned[i] = g

    idx = np.array(sorted(assigned), dtype=int)
    gts = np.array([assigned[int(i)] for i in idx], dtype=int)
    matched_spans = spans[gts]
    scales = (a[idx, 1] - a[idx, 0])[:, None]
    target_offsets = (matched_spans - a[idx]) / scales
    return idx, matched_spans, labels[gts], target_offsets
