"""Turn per-sequence predictions into scored fake segments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, DataError
from .fileio import atomic_write_text


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    score: float

    def iou(self, other: "Segment") -> float:
        return segment_iou((self.start, self.end), (other.start, other.end))


def segment_iou(a, b) -> float:
    return float(kernels.interval_iou(float(a[0]), float(a[1]), float(b[0]), float(b[1])))


def extract_segments(preds, seq_stride: float, video_duration: float, threshold: float = 0.5) -> list:
    """Candidate segments from sequences whose fake probability exceeds ``threshold``."""
    if seq_stride <= 0:
        raise ConfigError("seq_stride must be > 0")
    out = []
    for i, p in enumerate(preds):
        if p.p_fake <= threshold:
            continue
        ws = i * seq_stride
        start = min(max(ws + p.start_offset, 0.0), video_duration)
        end = min(max(ws + p.end_offset, 0.0), video_duration)
        out.append(Segment(start, max(end, start), float(p.p_fake)))
    return out


def soft_nms(segs, mode: str = "gaussian", iou_thresh: float = 0.5, sigma: float = 0.5,
             min_score: float = 0.001) -> list:
    """Suppress overlapping segments by removal (``hard``) or Gaussian score decay.

    Returns surviving segments ordered by final score, highest first.
    """
    if mode not in ("hard", "gaussian"):
        raise ConfigError(f"NMS mode must be 'hard' or 'gaussian', got {mode!r}")
    if mode == "gaussian" and sigma <= 0:
        raise ConfigError("sigma must be > 0 for gaussian Soft-NMS")
    segs = list(segs)
    if not segs:
        return []
    starts = np.array([s.start for s in segs])
    ends = np.array([s.end for s in segs])
    scores = np.array([s.score for s in segs])
    keep, new_scores = kernels.soft_nms(starts, ends, scores, mode == "gaussian",
                                        float(iou_thresh), float(sigma), float(min_score))
    return [Segment(segs[i].start, segs[i].end, float(sc)) for i, sc in zip(keep, new_scores)]


def localize_video(preds, seq_stride: float, video_duration: float, threshold: float = 0.5,
                   mode: str = "gaussian", iou_thresh: float = 0.5, sigma: float = 0.5,
                   min_score: float = 0.001) -> list:
    cands = extract_segments(preds, seq_stride, video_duration, threshold)
    return soft_nms(cands, mode, iou_thresh, sigma, min_score)


def format_predictions(by_video: dict) -> str:
    """``video_id<TAB>start<TAB>end<TAB>score`` lines with six decimals."""
    lines = [f"{vid}\t{s.start:.6f}\t{s.end:.6f}\t{s.score:.6f}"
             for vid, segs in by_video.items() for s in segs]
    return "".join(line + "\n" for line in lines)


def parse_predictions(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise DataError(f"line {lineno}: expected 4 tab-separated fields")
        try:
            start, end, score = (float(x) for x in parts[1:])
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric field") from None
        out.setdefault(parts[0], []).append(Segment(start, end, score))
    return out


def write_predictions(path, by_video: dict) -> None:
    atomic_write_text(path, format_predictions(by_video))


def read_predictions(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_predictions(fh.read())
