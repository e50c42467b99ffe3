"""Training objective: target assignment, focal and DIoU terms.

A point is assigned to an event when it sits inside the event and within the
center-sampling window, and the event's longer boundary distance falls in
that pyramid level's regression range. Among several qualifying events the
shortest wins (ties: earlier start, then lower label). The total objective is

    (sum of focal over all valid points and classes
     + lambda_reg * sum of DIoU over positive points) / max(T_plus, 1)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AnnotationSet
from .errors import ValidationError
from .heads import HeadOutput, PointSet

logger = logging.getLogger(__name__)

CENTER_SAMPLING_RADIUS = 1.5
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class Assignment:
    """Per-level training targets aligned with a PointSet."""

    cls_targets: list[np.ndarray]   # (T_level, C) float 0/1
    positive: list[np.ndarray]      # (T_level,) bool
    reg_targets: list[np.ndarray]   # (T_level, 2) float, stride units
    event_ids: list[np.ndarray]     # (T_level,) int, -1 for background
    t_plus: int = 0

    def recount(self) -> int:
        return int(sum(p.sum() for p in self.positive))


def assign_targets(points: PointSet, ann: AnnotationSet,
                   stride_sec: float, num_classes: int,
                   valid_masks: list[np.ndarray] | None = None,
                   center_radius: float = CENTER_SAMPLING_RADIUS) -> Assignment:
    """Label every pyramid point against one video's ground-truth events."""
    events = [(ei, ev.label, ev.start_sec / stride_sec, ev.end_sec / stride_sec)
              for ei, ev in enumerate(ann.events)]

    out = Assignment([], [], [], [])
    for li, lvl in enumerate(points.levels):
        ts = lvl.timestamps
        n = ts.shape[0]
        cls_t = np.zeros((n, num_classes), dtype=np.float32)
        pos = np.zeros(n, dtype=bool)
        reg_t = np.zeros((n, 2), dtype=np.float32)
        ev_id = np.full(n, -1, dtype=np.int64)
        valid = (valid_masks[li] if valid_masks is not None
                 else np.ones(n, dtype=bool))

        # (length, start, label) keys; smaller wins
        best_key = np.full((n, 3), np.inf)
        best = np.full(n, -1, dtype=np.int64)
        for ei, label, s_u, e_u in events:
            center = 0.5 * (s_u + e_u)
            radius = center_radius * lvl.stride_units
            inside = (ts >= max(s_u, center - radius)) & (ts <= min(e_u, center + radius))
            far = np.maximum(ts - s_u, e_u - ts)
            in_range = (far >= lvl.range_min) & (far < lvl.range_max)
            ok = inside & in_range & valid
            if not ok.any():
                continue
            key = np.array([e_u - s_u, s_u, float(label)])
            better = ok & _lex_less(key, best_key)
            best[better] = ei
            best_key[better] = key

        chosen = best >= 0
        for i in np.nonzero(chosen)[0]:
            ei, label, s_u, e_u = events[best[i]]
            pos[i] = True
            cls_t[i, label] = 1.0
            reg_t[i, 0] = (ts[i] - s_u) / lvl.stride_units
            reg_t[i, 1] = (e_u - ts[i]) / lvl.stride_units
            ev_id[i] = ei

        out.cls_targets.append(cls_t)
        out.positive.append(pos)
        out.reg_targets.append(reg_t)
        out.event_ids.append(ev_id)
    out.t_plus = out.recount()
    return out


def _lex_less(key: np.ndarray, best: np.ndarray) -> np.ndarray:
    """key < best[i] lexicographically, vectorized over rows of best."""
    k0, k1, k2 = key
    b0, b1, b2 = best[:, 0], best[:, 1], best[:, 2]
    return (k0 < b0) | ((k0 == b0) & ((k1 < b1) | ((k1 == b1) & (k2 < b2))))


# ---------------------------------------------------------------------------
# loss terms

def focal_loss(logits: Tensor, targets: np.ndarray,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA
               ) -> tuple[Tensor, Tensor]:
    """Sigmoid focal loss; returns (per-element losses, their sum).

    Uses softplus-based log-sigmoids, so large logits stay finite.
    """
    tape = logits.tape
    y = tape.constant(np.asarray(targets, dtype=float))
    one = tape.constant(1.0)
    p = ad.sigmoid(logits)
    # -log p = softplus(-x); -log(1-p) = softplus(x)
    ce_pos = ad.softplus(ad.neg(logits))
    ce_neg = ad.softplus(logits)
    pos_term = ad.mul(ad.mul(tape.constant(alpha),
                             ad.pow_const(ad.sub(one, p), gamma)), ce_pos)
    neg_term = ad.mul(ad.mul(tape.constant(1.0 - alpha),
                             ad.pow_const(p, gamma)), ce_neg)
    elem = ad.add(ad.mul(y, pos_term), ad.mul(ad.sub(one, y), neg_term))
    return elem, ad.sum_all(elem)


def diou_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """DIoU loss between distance pairs (d_start, d_end) around a shared point.

    ``pred`` and ``target`` are (N, 2) (a single (2,) pair is promoted). The
    predicted interval is [-d_s, d_e] on the stride-normalized axis and the
    target likewise; the loss per row is 1 - IoU + (center gap / enclosing
    span)^2, in [0, 2). Targets must be non-degenerate.
    """
    tape = pred.tape
    tgt = np.asarray(target, dtype=float)
    squeeze = False
    if pred.values.ndim == 1:
        pred = ad.reshape(pred, (1, 2))
        squeeze = True
        tgt = tgt.reshape(1, 2)
    if (pred.values < 0).any():
        raise ValidationError("predicted distances must be nonnegative")
    if ((tgt[:, 0] + tgt[:, 1]) <= 0).any():
        raise ValidationError("target interval is degenerate (zero length)")

    t = tape.constant(tgt)
    ds, de = ad.slice_cols(pred, 0, 1), ad.slice_cols(pred, 1, 2)
    ds_t, de_t = ad.slice_cols(t, 0, 1), ad.slice_cols(t, 1, 2)

    inter = ad.relu(ad.add(ad.minimum(de, de_t), ad.minimum(ds, ds_t)))
    len_p = ad.add(ds, de)
    len_g = ad.add(ds_t, de_t)
    union = ad.sub(ad.add(len_p, len_g), inter)
    iou = ad.div(inter, union)

    half = tape.constant(0.5)
    center_gap = ad.mul(ad.sub(ad.sub(de, ds), ad.sub(de_t, ds_t)), half)
    enclose = ad.add(ad.maximum(de, de_t), ad.maximum(ds, ds_t))
    penalty = ad.square(ad.div(center_gap, enclose))

    loss = ad.add(ad.sub(tape.constant(1.0), iou), penalty)
    if squeeze:
        return ad.reshape(loss, ())
    return loss


def diou_loss_single(d_start: float, d_end: float,
                     target_start: float, target_end: float) -> float:
    """Plain-float DIoU loss for one pair; handles the all-degenerate case."""
    enclose = max(d_end, target_end) + max(d_start, target_start)
    if enclose == 0.0:
        logger.warning("DIoU on two identical zero-length intervals, "
                       "returning 0 by convention")
        return 0.0
    tape = ad.Tape(dtype=np.float64)
    pred = tape.leaf(np.array([d_start, d_end]))
    return float(diou_loss(pred, np.array([target_start, target_end])).values)


@dataclass
class LossBreakdown:
    """Scalar summary of one objective evaluation."""

    l_cls: float
    l_reg: float
    t_plus: int
    lambda_reg: float
    total: float


def loss_sums(head_out: HeadOutput, assignment: Assignment,
              alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA
              ) -> tuple[Tensor, Tensor, int]:
    """Unnormalized loss sums for one video: (focal sum, DIoU sum, T_plus).

    Focal runs over every valid point and class; DIoU only over positive
    points. Callers divide by their own positive count, which lets several
    videos share one normalizer in a batch.
    """
    tape = head_out.cls_logits[0].tape
    cls_sum = tape.constant(0.0)
    reg_sum = tape.constant(0.0)
    for li, logits in enumerate(head_out.cls_logits):
        valid = head_out.valid_masks[li]
        elem, _ = focal_loss(logits, assignment.cls_targets[li], alpha, gamma)
        keep = tape.constant(valid.astype(float)[:, None])
        cls_sum = ad.add(cls_sum, ad.sum_all(ad.mul(elem, keep)))

        pos = assignment.positive[li]
        if pos.any():
            idx = np.nonzero(pos)[0]
            dist = head_out.distances[li]
            rows = _gather_rows(dist, idx)
            per_point = diou_loss(rows, assignment.reg_targets[li][idx])
            reg_sum = ad.add(reg_sum, ad.sum_all(per_point))
    return cls_sum, reg_sum, assignment.t_plus


def total_loss(head_out: HeadOutput, assignment: Assignment,
               lambda_reg: float = 1.0,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA
               ) -> tuple[Tensor, LossBreakdown]:
    """Combined objective for one video, normalized by max(T_plus, 1)."""
    tape = head_out.cls_logits[0].tape
    cls_sum, reg_sum, t_plus = loss_sums(head_out, assignment, alpha, gamma)
    denom = tape.constant(float(max(t_plus, 1)))
    total = ad.div(ad.add(cls_sum, ad.mul(tape.constant(lambda_reg), reg_sum)), denom)
    breakdown = LossBreakdown(
        l_cls=float(cls_sum.values),
        l_reg=float(reg_sum.values),
        t_plus=t_plus,
        lambda_reg=lambda_reg,
        total=float(total.values),
    )
    return total, breakdown


def _gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather with exact scatter-add backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g, acc):
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        acc(x, full)

    return x.tape.record(x.values[idx].copy(), bwd)
