"""Turn head outputs into scored interval predictions.

recover_intervals thresholds the per-point class probabilities, converts the
stride-normalized boundary distances back to seconds and keeps the top
candidates; soft_nms then decays overlapping detections per video and class.
Every ordering uses explicit tie-breaks so a permuted input yields an
identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ValidationError
from .heads import HeadOutput, PointSet

SCORE_THRESH = 0.001
PRE_NMS_TOPK = 2000
NMS_SIGMA = 0.5
NMS_IOU_THRESH = 0.5
NMS_MIN_SCORE = 0.001
NMS_MAX_OUT = 200


@dataclass(frozen=True)
class Interval:
    """A scored detection or a ground-truth event."""

    video_id: str
    label_id: int
    score: float
    start_sec: float
    end_sec: float

    def __post_init__(self):
        if not (self.start_sec < self.end_sec):
            raise ValidationError(
                f"interval must have start < end, got [{self.start_sec}, {self.end_sec}]")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValidationError(f"score must be finite in [0, 1], got {self.score}")


def _sort_key(iv: Interval):
    return (-iv.score, iv.start_sec, iv.label_id, iv.end_sec)


def recover_intervals(head_out: HeadOutput, points: PointSet, stride_sec: float,
                      video_id: str, duration_sec: float | None = None,
                      score_thresh: float = SCORE_THRESH,
                      pre_nms_topk: int = PRE_NMS_TOPK) -> list[Interval]:
    """Candidate intervals from every (level, point, class) above threshold.

    Boundaries are t -/+ d * stride (grid units) scaled to seconds and
    clamped to [0, duration]; zero-length results after clamping are dropped,
    and only the pre_nms_topk best-scored candidates survive.
    """
    if duration_sec is None:
        lvl0 = points.levels[0]
        duration_sec = (lvl0.timestamps[-1] + 0.5 * lvl0.stride_units) * stride_sec

    out: list[Interval] = []
    for lvl, logits, dist, valid in zip(points.levels, head_out.cls_logits,
                                        head_out.distances, head_out.valid_masks):
        probs = 1.0 / (1.0 + np.exp(-np.asarray(logits.values, dtype=np.float64)))
        d = np.asarray(dist.values, dtype=np.float64)
        starts = np.clip((lvl.timestamps - d[:, 0] * lvl.stride_units) * stride_sec,
                         0.0, duration_sec)
        ends = np.clip((lvl.timestamps + d[:, 1] * lvl.stride_units) * stride_sec,
                       0.0, duration_sec)
        keep_pt, keep_cls = np.nonzero(probs >= score_thresh)
        for i, c in zip(keep_pt, keep_cls):
            if not valid[i] or starts[i] >= ends[i]:
                continue
            out.append(Interval(video_id, int(c), float(probs[i, c]),
                                float(starts[i]), float(ends[i])))
    out.sort(key=_sort_key)
    return out[:pre_nms_topk]


def _overlap(a: Interval, b: Interval) -> float:
    inter = min(a.end_sec, b.end_sec) - max(a.start_sec, b.start_sec)
    if inter <= 0:
        return 0.0
    union = (a.end_sec - a.start_sec) + (b.end_sec - b.start_sec) - inter
    return inter / union


def soft_nms(preds: list[Interval], sigma: float = NMS_SIGMA,
             method: str = "gaussian", iou_thresh: float = NMS_IOU_THRESH,
             min_score: float = NMS_MIN_SCORE,
             max_out: int = NMS_MAX_OUT) -> list[Interval]:
    """Score-decaying suppression, independently per (video, class) group.

    Gaussian mode multiplies competitors by exp(-IoU^2 / sigma); hard mode
    zeroes them at IoU >= iou_thresh (so a threshold of 1 removes only exact
    duplicates). Iteration stops at max_out survivors per group or when
    everything left is below min_score.
    """
    if method not in ("gaussian", "hard"):
        raise ConfigError(f"unknown suppression method {method!r}")

    groups: dict[tuple[str, int], list[Interval]] = {}
    for p in preds:
        groups.setdefault((p.video_id, p.label_id), []).append(p)

    survivors: list[Interval] = []
    for key in sorted(groups):
        remaining = sorted(groups[key], key=_sort_key)
        kept = 0
        while remaining and kept < max_out:
            best = remaining.pop(0)
            survivors.append(best)
            kept += 1
            rescored = []
            for other in remaining:
                iou = _overlap(best, other)
                if method == "gaussian":
                    new_score = other.score * math.exp(-(iou * iou) / sigma)
                else:
                    new_score = 0.0 if iou >= iou_thresh else other.score
                if new_score >= min_score:
                    rescored.append(replace(other, score=new_score))
            rescored.sort(key=_sort_key)
            remaining = rescored

    survivors.sort(key=lambda iv: (iv.video_id,) + _sort_key(iv))
    return survivors


def select_top_k(preds: list[Interval], k: int = NMS_MAX_OUT) -> list[Interval]:
    """Best k detections per video, deterministically ordered."""
    by_video: dict[str, list[Interval]] = {}
    for p in preds:
        by_video.setdefault(p.video_id, []).append(p)
    out: list[Interval] = []
    for vid in sorted(by_video):
        ranked = sorted(by_video[vid], key=_sort_key)
        out.extend(ranked[:k])
    return out
