"""Helpers for parameter stores: plain dicts of named numpy arrays."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tape, Tensor


def bind(tape: Tape, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Register every parameter array as a differentiable leaf on ``tape``."""
    return {name: tape.leaf(arr) for name, arr in arrays.items()}


def collect_grads(bound: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients after backward; parameters not touched get zeros."""
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.values))
        for name, t in bound.items()
    }


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint norm is at most max_norm."""
    norm = global_norm(grads)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
