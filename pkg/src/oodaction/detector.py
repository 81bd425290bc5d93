"""Inference: anchor generation, boundary refinement, the three-way
uncertainty/actionness decision rule, and greedy NMS.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import ObjectFeatureClip
from .errors import ContractError
from .losses import opinion_arrays


def generate_anchors(T: int, scales) -> np.ndarray:
    """Sliding-window anchor spans at the given scales, stride scale/2.

    Windows are fully inside [0, T]; a scale not smaller than T collapses
    to the single whole-clip span. Result is deduplicated and sorted by
    (start, end).
    """
    scales = sorted(set(int(s) for s in scales))
    if not scales:
        raise ContractError("anchor scale list must not be empty")
    if any(s < 1 for s in scales):
        raise ContractError("anchor scales must be positive")
    spans = set()
    for scale in scales:
        if scale >= T:
            spans.add((0, T))
            continue
        stride = max(scale // 2, 1)
        for start in range(0, T - scale + 1, stride):
            spans.add((start, start + scale))
    return np.array(sorted(spans), dtype=int)


@dataclass
class Detection:
    """A scored temporal segment with its open-set verdict."""

    video_id: str
    start: float
    end: float
    verdict: str        # "id" or "ood"
    label: int          # argmax class, reported for both verdicts
    score: float        # expected_p of the class (id) or uncertainty (ood)
    uncertainty: float
    actionness: float

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({"video_id": d["video_id"], "start": d["start"],
                           "end": d["end"], "verdict": d["verdict"],
                           "class": d["label"], "score": d["score"],
                           "u": d["uncertainty"], "a": d["actionness"]},
                          sort_keys=True)


def detection_from_json(line: str) -> Detection:
    d = json.loads(line)
    return Detection(video_id=d["video_id"], start=float(d["start"]),
                     end=float(d["end"]), verdict=d["verdict"],
                     label=int(d["class"]), score=float(d["score"]),
                     uncertainty=float(d["u"]), actionness=float(d["a"]))


def classify_verdict(u: float, a: float, u_tau: float, a_tau: float) -> str:
    """Three-way decision: OOD when uncertain but action-like, ID when
    confident and action-like, background otherwise. Equality routes
    u == u_tau to ID and a == a_tau to background."""
    if a > a_tau:
        return "ood" if u > u_tau else "id"
    return "background"


def segment_tiou(a_start, a_end, b_start, b_end) -> float:
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], nms_tiou: float) -> list[Detection]:
    """Greedy suppression within one group at tIoU >= nms_tiou."""
    ordered = sorted(detections, key=lambda d: (-d.score, d.start, d.end))
    kept: list[Detection] = []
    for det in ordered:
        if all(segment_tiou(det.start, det.end, k.start, k.end) < nms_tiou for k in kept):
            kept.append(det)
    return kept


def detect(model, clip: ObjectFeatureClip, u_tau: float = 0.6, a_tau: float = 0.5,
           nms_tiou: float = 0.5, base_rate: float = 0.5) -> list[Detection]:
    """Full inference for one clip.

    Forward pass, anchor refinement by predicted offsets (normalized by
    anchor length, clamped to the clip, degenerate spans dropped), verdict
    per proposal, then per-class NMS for ID detections and a separate NMS
    pool for OOD ones. Output is sorted by (score desc, start, end).
    """
    out = model.forward(clip)
    T = clip.T
    a_hat = out.actionness.data[:, 0]
    alphas, betas = out.alphas.data, out.betas.data
    offsets = out.offsets.data
    spans = out.anchor_spans

    _, _, u_all, p_all = opinion_arrays(alphas, betas, base_rate)
    yhat = p_all.argmax(axis=1)
    rows = np.arange(spans.shape[0])
    u_sel = u_all[rows, yhat]
    p_sel = p_all[rows, yhat]

    raw: list[Detection] = []
    for i, (ts, te) in enumerate(spans):
        scale = float(te - ts)
        start = min(max(ts + offsets[i, 0] * scale, 0.0), float(T))
        end = min(max(te + offsets[i, 1] * scale, 0.0), float(T))
        if start >= end:
            continue
        a_i = float(a_hat[ts:te].mean())
        u_i = float(u_sel[i])
        verdict = classify_verdict(u_i, a_i, u_tau, a_tau)
        if verdict == "background":
            continue
        score = float(p_sel[i]) if verdict == "id" else u_i
        raw.append(Detection(video_id=clip.video_id, start=float(start), end=float(end),
                             verdict=verdict, label=int(yhat[i]), score=score,
                             uncertainty=u_i, actionness=a_i))

    kept: list[Detection] = []
    for c in range(model.num_classes):
        kept.extend(nms([d for d in raw if d.verdict == "id" and d.label == c], nms_tiou))
    kept.extend(nms([d for d in raw if d.verdict == "ood"], nms_tiou))
    kept.sort(key=lambda d: (-d.score, d.start, d.end))
    return kept
