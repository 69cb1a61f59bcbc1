"""Detection (ROC family) and temporal localization (AP/AR) metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError
from .fileio import atomic_write_text
from .localize import segment_iou

AR_IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
DETECTION_METRICS = ("AUC", "pAUC", "EER", "ACC", "TPR", "FPR")
LOCALIZATION_METRICS = ("AP@0.5", "AP@0.75", "AP@0.95", "AR@10", "AR@20", "AR@50", "AR@100")


def _scored(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    if labels.all() or not labels.any():
        raise MetricError("ROC metrics need at least one positive and one negative")
    return scores, labels


def roc_curve(scores, labels) -> list:
    """ROC points ``(fpr, tpr, threshold)`` for every distinct score, FPR ascending.

    A sample is called positive when its score is ``>= threshold``; tied scores
    move together. The first point is ``(0, 0, inf)``.
    """
    scores, labels = _scored(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    n_pos, n_neg = y.sum(), (~y).sum()
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    points = [(0.0, 0.0, float("inf"))]
    points += [(fp[i] / n_neg, tp[i] / n_pos, float(s[i])) for i in last]
    return points


def auc(scores, labels) -> float:
    pts = roc_curve(scores, labels)
    return float(sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0, _), (x1, y1, _) in zip(pts, pts[1:])))


def pauc(scores, labels, fpr_max: float = 0.1) -> float:
    """Area under the ROC curve for FPR in ``[0, fpr_max]``, divided by ``fpr_max``."""
    if not 0 < fpr_max <= 1:
        raise MetricError(f"fpr_max must lie in (0, 1], got {fpr_max}")
    pts = roc_curve(scores, labels)
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(pts, pts[1:]):
        if x0 >= fpr_max:
            break
        if x1 <= fpr_max:
            area += (x1 - x0) * (y0 + y1) / 2
        else:
            y_cut = y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0)
            area += (fpr_max - x0) * (y0 + y_cut) / 2
            break
    return float(area / fpr_max)


def eer(scores, labels) -> float:
    """Equal error rate, interpolated linearly between the bracketing ROC points."""
    pts = roc_curve(scores, labels)
    for (x0, y0, _), (x1, y1, _) in zip(pts, pts[1:]):
        g0, g1 = x0 + y0 - 1.0, x1 + y1 - 1.0
        if g0 <= 0.0 <= g1:
            if g1 == g0:
                return float(x0)
            lam = -g0 / (g1 - g0)
            return float(x0 + lam * (x1 - x0))
    raise MetricError("ROC curve never crosses FPR = FNR")  # unreachable for valid input


def confusion_rates(scores, labels, threshold: float = 0.5) -> dict:
    """ACC/TPR/FPR with ``score > threshold`` called fake."""
    scores, labels = _scored(scores, labels)
    pred = scores > threshold
    tp = int(np.sum(pred & labels))
    tn = int(np.sum(~pred & ~labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    total = tp + tn + fp + fn
    return {"ACC": (tp + tn) / total, "TPR": tp / (tp + fn), "FPR": fp / (fp + tn),
            "TP": tp, "TN": tn, "FP": fp, "FN": fn}


def detection_metrics(scores, labels, threshold: float = 0.5, fpr_max: float = 0.1) -> dict:
    rates = confusion_rates(scores, labels, threshold)
    return {
        "AUC": auc(scores, labels),
        "pAUC": pauc(scores, labels, fpr_max),
        "EER": eer(scores, labels),
        "ACC": rates["ACC"],
        "TPR": rates["TPR"],
        "FPR": rates["FPR"],
    }


# -- localization -------------------------------------------------------------

def _count_gt(gts: dict) -> int:
    total = 0
    for vid, segs in gts.items():
        for s, e in segs:
            if not e > s:
                raise MetricError(f"{vid}: ground-truth segment ({s}, {e}) is empty")
        total += len(segs)
    if total == 0:
        raise MetricError("localization metrics need at least one ground-truth segment")
    return total


def ap_at_iou(preds: dict, gts: dict, t: float) -> float:
    """Average precision at IoU threshold ``t`` over predictions pooled across videos.

    ``preds`` maps video id -> list of :class:`~avdetect.localize.Segment`;
    ``gts`` maps video id -> list of ``(start, end)``. Predictions are visited by
    descending score; each one claims the unmatched ground truth of its video
    with the highest IoU, provided that IoU is at least ``t``. AP is the area
    under the precision envelope (all-point interpolation).
    """
    if not 0 < t <= 1:
        raise MetricError(f"IoU threshold must lie in (0, 1], got {t}")
    n_gt = _count_gt(gts)
    pooled = [(seg.score, vid, seg) for vid, segs in preds.items() for seg in segs]
    if not pooled:
        return 0.0
    pooled.sort(key=lambda item: -item[0])
    used = {vid: np.zeros(len(segs), dtype=bool) for vid, segs in gts.items()}
    hits = np.zeros(len(pooled))
    for k, (_, vid, seg) in enumerate(pooled):
        cands = gts.get(vid, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(cands):
            if used[vid][j]:
                continue
            iou = segment_iou((seg.start, seg.end), g)
            if iou >= t and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[vid][best] = True
            hits[k] = 1.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


def ar_at_k(preds: dict, gts: dict, k: int, thresholds=AR_IOU_GRID) -> float:
    """Average recall with the top ``k`` predictions per video.

    A ground-truth segment counts as recalled at threshold ``t`` when any kept
    prediction of its video overlaps it with IoU >= ``t``. Recall is averaged
    over ``thresholds`` and then over videos that have ground truth.
    """
    if k < 1:
        raise MetricError("k must be >= 1")
    _count_gt(gts)
    per_video = []
    for vid, segs in gts.items():
        if not segs:
            continue
        top = sorted(preds.get(vid, []), key=lambda s: -s.score)[:k]
        best = np.array([max((segment_iou((p.start, p.end), g) for p in top), default=0.0) for g in segs])
        per_video.append(np.mean([np.mean(best >= t) for t in thresholds]))
    return float(np.mean(per_video))


def localization_metrics(preds: dict, gts: dict) -> dict:
    out = {f"AP@{t}": ap_at_iou(preds, gts, t) for t in (0.5, 0.75, 0.95)}
    out.update({f"AR@{k}": ar_at_k(preds, gts, k) for k in (10, 20, 50, 100)})
    return out


@dataclass
class MetricsReport:
    values: dict
    notes: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"# {note}" for note in self.notes]
        lines += [f"{name} = {value:.4f}" for name, value in self.values.items()]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        atomic_write_text(path, self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values, notes = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                notes.append(line[1:].strip())
            elif "=" in line:
                key, value = line.split("=", 1)
                values[key.strip()] = float(value)
        return cls(values, notes)
