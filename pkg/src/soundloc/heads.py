"""Anchor-free decoder heads: per-moment class logits and boundary distances.

Both heads share one parameter set across pyramid levels: a trunk of two
kernel-3 convolutions with layer norm and ReLU, then a final kernel-3
convolution to C channels (classification) or 2 channels (regression).
Regression outputs pass through softplus so decoded intervals always have
start <= end; distances are expressed in units of the level stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Pyramid
from .errors import EmptyInputError

DEFAULT_RANGE_BASE = 4.0
PRIOR_PROB = 0.01


@dataclass
class LevelPoints:
    """Point lattice for one pyramid level, in input-grid units."""

    timestamps: np.ndarray    # (T_level,), (i + 0.5) * stride
    stride_units: int
    range_min: float          # regression range [range_min, range_max)
    range_max: float


@dataclass
class PointSet:
    levels: list[LevelPoints] = field(default_factory=list)


def generate_points(pyramid: Pyramid, range_base: float = DEFAULT_RANGE_BASE) -> PointSet:
    """Timestamps and regression ranges for every pyramid level.

    Level k covers events whose longer boundary distance lies in
    [range_base * s_{k-1}, range_base * s_k), with s_{-1} = 0 and the last
    upper bound open at infinity; together the ranges partition (0, inf).
    """
    if not pyramid.levels:
        raise EmptyInputError("cannot generate points for an empty pyramid")
    points = PointSet()
    prev_stride = 0
    n = len(pyramid.levels)
    for k, lvl in enumerate(pyramid.levels):
        t = lvl.features.shape[0]
        ts = (np.arange(t, dtype=np.float64) + 0.5) * lvl.stride_units
        lo = range_base * prev_stride
        hi = math.inf if k == n - 1 else range_base * lvl.stride_units
        points.levels.append(LevelPoints(ts, lvl.stride_units, lo, hi))
        prev_stride = lvl.stride_units
    return points


@dataclass
class HeadOutput:
    """Per-level head outputs, aligned with the pyramid levels."""

    cls_logits: list[Tensor]    # (T_level, C)
    reg_raw: list[Tensor]       # (T_level, 2), pre-softplus
    distances: list[Tensor]     # (T_level, 2), nonnegative, stride units
    valid_masks: list[np.ndarray]


def init_head_params(d_model: int, num_classes: int, rng: np.random.Generator,
                     prior_prob: float = PRIOR_PROB) -> dict[str, np.ndarray]:
    def conv(k, c_in, c_out):
        std = np.sqrt(2.0 / (k * c_in))
        return rng.normal(0.0, std, size=(k, c_in, c_out)).astype(np.float32)

    p: dict[str, np.ndarray] = {}
    for branch in ("cls", "reg"):
        for i in (1, 2):
            p[f"head.{branch}.conv{i}.w"] = conv(3, d_model, d_model)
            p[f"head.{branch}.conv{i}.b"] = np.zeros(d_model, dtype=np.float32)
            p[f"head.{branch}.ln{i}.gamma"] = np.ones(d_model, dtype=np.float32)
            p[f"head.{branch}.ln{i}.beta"] = np.zeros(d_model, dtype=np.float32)
    p["head.cls.out.w"] = conv(3, d_model, num_classes)
    # bias so that initial sigmoid outputs sit near the positive prior
    p["head.cls.out.b"] = np.full(
        num_classes, -math.log((1.0 - prior_prob) / prior_prob), dtype=np.float32)
    p["head.reg.out.w"] = conv(3, d_model, 2)
    p["head.reg.out.b"] = np.zeros(2, dtype=np.float32)
    return p


def _head_trunk(x: Tensor, p: Mapping[str, Tensor], branch: str,
                valid: np.ndarray) -> Tensor:
    mask = x.tape.constant(valid.astype(float)[:, None])
    h = x
    for i in (1, 2):
        h = ad.add(ad.conv1d(h, p[f"head.{branch}.conv{i}.w"]),
                   p[f"head.{branch}.conv{i}.b"])
        h = ad.layer_norm(h, p[f"head.{branch}.ln{i}.gamma"],
                          p[f"head.{branch}.ln{i}.beta"])
        h = ad.mul(ad.relu(h), mask)
    return ad.add(ad.conv1d(h, p[f"head.{branch}.out.w"]),
                  p[f"head.{branch}.out.b"])


def classify(pyramid: Pyramid, p: Mapping[str, Tensor]) -> list[Tensor]:
    """Class logits per level; probabilities are sigmoid(logit) downstream."""
    return [_head_trunk(lvl.features, p, "cls", lvl.valid_mask)
            for lvl in pyramid.levels]


def regress(pyramid: Pyramid, p: Mapping[str, Tensor]) -> list[Tensor]:
    """Raw boundary-distance outputs per level (pre-softplus)."""
    return [_head_trunk(lvl.features, p, "reg", lvl.valid_mask)
            for lvl in pyramid.levels]


def run_heads(pyramid: Pyramid, p: Mapping[str, Tensor]) -> HeadOutput:
    cls_logits = classify(pyramid, p)
    reg_raw = regress(pyramid, p)
    distances = [ad.softplus(r) for r in reg_raw]
    return HeadOutput(
        cls_logits=cls_logits,
        reg_raw=reg_raw,
        distances=distances,
        valid_masks=[lvl.valid_mask for lvl in pyramid.levels],
    )
