"""Turns detection output plus ground-truth annotations into a MetricReport.

Pool protocol: every emitted detection (both verdicts) is matched to its
best-overlapping ground-truth segment; detections reaching the matching
tIoU enter the OOD-vs-ID score pool with the uncertainty as score and
"overlaps an OOD segment" as the positive label. Detections overlapping
nothing are excluded from that pool but still count on the false-positive
side of OSDR. mAP uses ID-verdict detections only, against ID segments.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from .data import DatasetManifest, load_clip
from .detector import Detection
from .metrics import (MetricReport, ScoredSample, auroc, aupr, far_at_95,
                      mean_ap, osdr, tiou)


def load_ground_truth(manifest: DatasetManifest):
    """Per-video ID segments (with class) and OOD segments."""
    id_gt: dict[str, list] = {}
    ood_gt: dict[str, list] = {}
    for path in manifest.clip_paths:
        clip, ann = load_clip(path)
        id_gt[clip.video_id] = [(tuple(seg), lab) for seg, lab in ann.id_segments()]
        ood_gt[clip.video_id] = [tuple(seg) for seg in ann.ood_segments()]
    return id_gt, ood_gt


def _best_overlap(det: Detection, segments) -> float:
    span = (det.start, det.end)
    return max((tiou(span, seg) for seg in segments), default=0.0)


def build_ood_pool(detections, id_gt, ood_gt, match_tiou: float):
    """Scored samples for AUROC/AUPR/FAR@95: u as score, OOD as positive."""
    pool = []
    for det in detections:
        ov_id = _best_overlap(det, [seg for seg, _lab in id_gt.get(det.video_id, [])])
        ov_ood = _best_overlap(det, ood_gt.get(det.video_id, []))
        if max(ov_id, ov_ood) < match_tiou:
            continue
        pool.append(ScoredSample(score=det.uncertainty, is_positive=ov_ood > ov_id))
    return pool


def osdr_inputs(detections, id_gt, ood_gt, match_tiou: float):
    """Greedy correct-match assignment for the OSDR sweep.

    Detections are visited by ascending uncertainty; each may claim the
    unmatched ID ground truth of the same video and class with the highest
    tIoU >= match_tiou. Unclaimed detections become false candidates.
    """
    remaining = {vid: list(segs) for vid, segs in id_gt.items()}
    matched_u = []
    false_u = []
    order = sorted(detections, key=lambda d: (d.uncertainty, -d.score, d.start, d.end))
    for det in order:
        candidates = remaining.get(det.video_id, [])
        best, best_ov = -1, -1.0
        for i, (seg, lab) in enumerate(candidates):
            if lab != det.label:
                continue
            ov = tiou((det.start, det.end), seg)
            if ov >= match_tiou and ov > best_ov:
                best, best_ov = i, ov
        if best >= 0:
            candidates.pop(best)
            matched_u.append(det.uncertainty)
        else:
            false_u.append(det.uncertainty)
    unmatched = sum(len(segs) for segs in remaining.values())
    has_ood = any(ood_gt.get(vid) for vid in ood_gt)
    return matched_u, unmatched, false_u, has_ood


def build_report(detections: list[Detection], id_gt, ood_gt,
                 tiou_thresholds=(0.3, 0.4, 0.5, 0.6, 0.7),
                 ood_match_tiou: float = 0.5) -> MetricReport:
    dets_by_class = defaultdict(list)
    gts_by_class = defaultdict(list)
    for vid, segs in id_gt.items():
        for seg, lab in segs:
            gts_by_class[lab].append((vid, seg))
    for det in detections:
        if det.verdict == "id":
            dets_by_class[det.label].append((det.score, det.video_id, (det.start, det.end)))

    # mAP matches within each video; fold video identity into disjoint spans
    per_thr, mean_over = _video_aware_map(dets_by_class, gts_by_class, tiou_thresholds)

    pool = build_ood_pool(detections, id_gt, ood_gt, ood_match_tiou)
    auroc_v = auroc(pool)
    aupr_v = aupr(pool)
    far_v = far_at_95(pool)
    osdr_v = osdr(*osdr_inputs(detections, id_gt, ood_gt, ood_match_tiou))
    return MetricReport(
        auroc=auroc_v, aupr=aupr_v, far95=far_v, osdr=osdr_v,
        map_per_tiou=per_thr, mean_map=mean_over,
        ood_scores=[s.score for s in pool if s.is_positive],
        id_scores=[s.score for s in pool if not s.is_positive],
    )


def _video_aware_map(dets_by_class, gts_by_class, thresholds):
    """mean_ap over (class, threshold) with per-video matching, realized by
    offsetting each video's time axis into its own disjoint window."""
    videos = sorted({vid for gts in gts_by_class.values() for vid, _ in gts}
                    | {vid for dets in dets_by_class.values() for _, vid, _ in dets})
    span_limit = 1.0
    for gts in gts_by_class.values():
        for _vid, (s, e) in gts:
            span_limit = max(span_limit, e)
    for dets in dets_by_class.values():
        for _score, _vid, (s, e) in dets:
            span_limit = max(span_limit, e)
    offset = {vid: i * (span_limit + 1.0) for i, vid in enumerate(videos)}

    d = {c: [(score, (s + offset[vid], e + offset[vid]))
             for score, vid, (s, e) in dets if vid in offset]
         for c, dets in dets_by_class.items()}
    g = {c: [(s + offset[vid], e + offset[vid]) for vid, (s, e) in gts]
         for c, gts in gts_by_class.items()}
    return mean_ap(d, g, thresholds)


def format_table(report: MetricReport) -> str:
    """Printable metric table: mAP per tIoU plus the scalar OOD metrics."""
    thr = sorted(report.map_per_tiou)
    lines = []
    header = "metric      " + "".join(f"tIoU={t:<6g}" for t in thr) + "Mean"
    lines.append(header)
    lines.append("-" * len(header))
    row = "mAP         " + "".join(f"{report.map_per_tiou[t]:<11.4f}" for t in thr)
    lines.append(row + f"{report.mean_map:.4f}")
    lines.append("")
    lines.append(f"AUROC : {report.auroc:.4f}")
    lines.append(f"AUPR  : {report.aupr:.4f}")
    lines.append(f"FAR@95: {report.far95:.4f}")
    lines.append(f"OSDR  : {report.osdr:.4f}")
    return "\n".join(lines)
