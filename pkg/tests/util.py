"""Shared helpers for the test suite: finite-difference oracles."""

import numpy as np

from oodaction import autodiff as ad


def numeric_grad(fn, x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(x0, dtype=np.float64)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        grad[idx] = (fn(xp) - fn(xm)) / (2.0 * eps)
    return grad


def analytic_grad(fn, x0: np.ndarray) -> np.ndarray:
    """Gradient of a scalar tensor function via the tape."""
    x = ad.Tensor(x0, requires_grad=True)
    with ad.Tape():
        loss = fn(x)
    ad.backward(loss)
    return x.grad


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / scale).max())


def check_grad(fn_tensor, fn_plain, x0, tol: float = 1e-4, eps: float = 1e-6):
    """Assert analytic and numeric gradients of a scalar function agree."""
    an = analytic_grad(fn_tensor, x0)
    num = numeric_grad(fn_plain, x0, eps)
    err = max_rel_err(an, num, floor=1e-6)
    assert err < tol, f"gradient mismatch: rel err {err:.3e}"
    return err


# ---------------------------------------------------------------------------
# brute-force metric oracles (independent of src/ implementations)


def oracle_auroc(samples):
    """Definitional pair counting with half credit for ties."""
    pos = np.array([s.score for s in samples if s.is_positive])
    neg = np.array([s.score for s in samples if not s.is_positive])
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (pos.size * neg.size)


def oracle_aupr(samples):
    """Exhaustive threshold sweep over descending unique scores."""
    scores = np.array([s.score for s in samples])
    labels = np.array([s.is_positive for s in samples])
    n_pos = labels.sum()
    area, prev_recall = 0.0, 0.0
    for th in sorted(set(scores), reverse=True):
        keep = scores >= th
        tp = (keep & labels).sum()
        precision = tp / keep.sum()
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def oracle_far95(samples, target=0.95):
    """Exhaustive sweep: highest threshold reaching the target TPR."""
    scores = np.array([s.score for s in samples])
    labels = np.array([s.is_positive for s in samples])
    n_pos, n_neg = labels.sum(), (~labels).sum()
    for th in sorted(set(scores), reverse=True):
        keep = scores >= th
        if (keep & labels).sum() / n_pos >= target:
            return (keep & ~labels).sum() / n_neg
    raise AssertionError("unreachable: the lowest threshold has TPR 1")


def oracle_ap(dets, gts, threshold):
    """Independent AP: explicit greedy matching and explicit PR integration.

    dets: list of (score, (start, end)); gts: list of (start, end).
    """
    def seg_iou(a, b):
        inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
        return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], dets[i][1]))
    taken = set()
    flags = []
    for i in order:
        span = dets[i][1]
        choices = []
        for g, gspan in enumerate(gts):
            if g in taken:
                continue
            ov = seg_iou(span, gspan)
            if ov >= threshold:
                choices.append((ov, -g))
        if choices:
            _ov, negg = max(choices)
            taken.add(-negg)
            flags.append(1)
        else:
            flags.append(0)
    points = []
    tp = 0
    for rank, f in enumerate(flags, start=1):
        tp += f
        points.append((tp / len(gts), tp / rank))
    area, prev_r = 0.0, 0.0
    for k, (r, _p) in enumerate(points):
        if r > prev_r:
            area += (r - prev_r) * max(p for rr, p in points[k:])
        prev_r = r
    return area


def random_scored_samples(rng, n_max=200):
    """Random mixed-tie score/label sets with both classes present."""
    from oodaction.metrics import ScoredSample
    n = int(rng.integers(2, n_max))
    scores = np.round(rng.normal(size=n), 1)
    labels = rng.random(n) > rng.uniform(0.2, 0.8)
    if not labels.any():
        labels[0] = True
    if labels.all():
        labels[-1] = False
    return [ScoredSample(float(s), bool(l)) for s, l in zip(scores, labels)]


def random_detection_instance(rng):
    """A small random (detections, ground truths, threshold) mAP instance."""
    n_gt = int(rng.integers(1, 6))
    n_det = int(rng.integers(0, 11))
    gts = []
    cursor = 0.0
    for _g in range(n_gt):
        cursor += rng.uniform(0.5, 3.0)
        end = cursor + rng.uniform(1.0, 6.0)
        gts.append((cursor, end))
        cursor = end
    dets = []
    for _d in range(n_det):
        if rng.random() < 0.7 and gts:
            s, e = gts[int(rng.integers(0, n_gt))]
            jitter = rng.normal(scale=1.0, size=2)
            span = (s + jitter[0], max(s + jitter[0] + 0.5, e + jitter[1]))
        else:
            s = rng.uniform(0, 25)
            span = (s, s + rng.uniform(0.5, 6.0))
        dets.append((round(float(rng.random()), 2), span))
    threshold = float(rng.choice([0.3, 0.5, 0.7]))
    return dets, gts, threshold
