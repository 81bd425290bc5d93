"""Open-set evaluation metrics: AUROC, AUPR, FAR@95, temporal IoU,
interpolated mAP over tIoU thresholds, and the open-set detection rate.

Score conventions: OOD samples are the positives for AUROC/AUPR/FAR@95
and higher scores mean "more OOD". AUROC counts ties with half credit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MetricUndefinedError


@dataclass
class ScoredSample:
    score: float
    is_positive: bool


def _split_scores(samples):
    pos = np.array([s.score for s in samples if s.is_positive], dtype=np.float64)
    neg = np.array([s.score for s in samples if not s.is_positive], dtype=np.float64)
    if not np.isfinite(pos).all() or not np.isfinite(neg).all():
        raise ContractError("scores must be finite")
    return pos, neg


def auroc(samples) -> float:
    """Probability that a random positive outscores a random negative,
    ties counted one half (Mann-Whitney)."""
    pos, neg = _split_scores(samples)
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefinedError("AUROC needs at least one positive and one negative")
    scores = np.concatenate([pos, neg])
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:  # midranks for tied scores
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[:pos.size].sum()
    return (rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)


def aupr(samples) -> float:
    """Area under precision-recall via step-wise summation over descending
    unique score thresholds; positives are the OOD samples."""
    pos, neg = _split_scores(samples)
    if pos.size == 0:
        raise MetricUndefinedError("AUPR needs at least one positive")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, dtype=bool), np.zeros(neg.size, dtype=bool)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels)
    predicted = np.arange(1, scores.size + 1)
    # evaluate only at the last index of each unique score (threshold sweep)
    last = np.flatnonzero(np.diff(scores, append=-np.inf) != 0)
    precision = tp[last] / predicted[last]
    recall = tp[last] / pos.size
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def far_at_95(samples, tpr_target: float = 0.95) -> float:
    """False-alarm rate at the first operating point reaching the target
    true-positive rate, sweeping thresholds from high to low."""
    pos, neg = _split_scores(samples)
    if pos.size == 0 or neg.size == 0:
        raise MetricUndefinedError("FAR@95 needs at least one positive and one negative")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(pos.size, dtype=bool), np.zeros(neg.size, dtype=bool)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    last = np.flatnonzero(np.diff(scores, append=-np.inf) != 0)
    tpr = tp[last] / pos.size
    fpr = fp[last] / neg.size
    hits = np.flatnonzero(tpr >= tpr_target)
    return float(fpr[hits[0]])


def tiou(a, b) -> float:
    """Temporal intersection over union of two (start, end) segments."""
    (a_s, a_e), (b_s, b_e) = a, b
    if a_e <= a_s or b_e <= b_s:
        raise ContractError(f"degenerate segment in tIoU: {a} vs {b}")
    inter = max(0.0, min(a_e, b_e) - max(a_s, b_s))
    union = (a_e - a_s) + (b_e - b_s) - inter
    return inter / union


def _average_precision(dets, gts, threshold: float) -> float:
    """All-point interpolated AP for one class at one tIoU threshold.

    dets: list of (score, (start, end)); gts: list of (start, end).
    Detections are matched greedily in score order to the unmatched
    ground truth with highest tIoU >= threshold.
    """
    if not gts:
        raise ContractError("AP undefined without ground truth")
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], dets[i][1]))
    matched = [False] * len(gts)
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        _score, span = dets[i]
        best, best_ov = -1, -1.0
        for g, gspan in enumerate(gts):
            if matched[g]:
                continue
            ov = tiou(span, gspan)
            if ov >= threshold and ov > best_ov:
                best, best_ov = g, ov
        if best >= 0:
            matched[best] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(dets) + 1)
    recall = tp_cum / len(gts)
    # precision envelope, then area under the step curve
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def mean_ap(detections_by_class: dict, gts_by_class: dict, tiou_thresholds):
    """mAP per tIoU threshold plus the mean over thresholds.

    Classes without ground truth are skipped; classes with ground truth
    but no detections score 0.
    """
    thresholds = list(tiou_thresholds)
    classes = sorted(c for c, g in gts_by_class.items() if g)
    per_thr = {}
    for thr in thresholds:
        if not classes:
            per_thr[thr] = 0.0
            continue
        aps = [_average_precision(detections_by_class.get(c, []), gts_by_class[c], thr)
               for c in classes]
        per_thr[thr] = float(np.mean(aps))
    mean_over = float(np.mean(list(per_thr.values()))) if per_thr else 0.0
    return per_thr, mean_over


def osdr(matched_gt_u, unmatched_gt_count: int, false_u, has_ood_gt: bool) -> float:
    """Open-set detection rate.

    Sweeps an acceptance threshold over uncertainty: a detection counts
    when its u is at or below the threshold. The curve plots the fraction
    of ID ground truths whose correctly-classified match is accepted
    (CDR) against the fraction of accepted false candidates (FPR);
    the area under it is returned (trapezoidal).

    matched_gt_u: best (lowest) u among correct detections per matched GT.
    unmatched_gt_count: ID ground truths with no correct detection.
    false_u: u of detections that did not correctly match any ID GT
             (OOD-overlapping and background detections).
    """
    if not has_ood_gt:
        raise MetricUndefinedError("OSDR needs OOD ground truth in the evaluation set")
    matched_gt_u = np.asarray(list(matched_gt_u), dtype=np.float64)
    false_u = np.asarray(list(false_u), dtype=np.float64)
    n_gt = matched_gt_u.size + unmatched_gt_count
    if n_gt == 0:
        raise MetricUndefinedError("OSDR needs ID ground truth in the evaluation set")
    if matched_gt_u.size == 0:
        return 0.0
    thresholds = np.unique(np.concatenate([matched_gt_u, false_u]))
    cdr = [0.0]
    fpr = [0.0]
    for th in thresholds:
        cdr.append((matched_gt_u <= th).sum() / n_gt)
        fpr.append((false_u <= th).sum() / false_u.size if false_u.size else 0.0)
    if fpr[-1] < 1.0:  # close the curve at FPR 1 with the final CDR
        fpr.append(1.0)
        cdr.append(cdr[-1])
    return float(np.trapezoid(cdr, fpr))


@dataclass
class MetricReport:
    """Bundled evaluation results plus the score pools that produced the
    OOD-detection numbers."""

    auroc: float
    aupr: float
    far95: float
    osdr: float
    map_per_tiou: dict[float, float]
    mean_map: float
    ood_scores: list[float] = field(default_factory=list)
    id_scores: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "auroc": self.auroc, "aupr": self.aupr, "far95": self.far95,
            "osdr": self.osdr,
            "map_per_tiou": {f"{k:g}": v for k, v in self.map_per_tiou.items()},
            "mean_map": self.mean_map,
            "ood_scores": self.ood_scores, "id_scores": self.id_scores,
        }, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        lines = ["metric,tiou,value"]
        for name in ("auroc", "aupr", "far95", "osdr", "mean_map"):
            lines.append(f"{name},,{getattr(self, name)!r}")
        for thr in sorted(self.map_per_tiou):
            lines.append(f"map,{thr:g},{self.map_per_tiou[thr]!r}")
        return "\n".join(lines) + "\n"
