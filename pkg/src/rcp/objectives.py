"""Training objectives and schedules.

The repair loss matches per-feature means and standard deviations of
student and teacher hidden states, which is the normalised squared
2-Wasserstein distance between their diagonal-Gaussian fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor

VARIANCE_SHIFT = 1e-8


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    task: float = 1.5
    repair: float = 40.0
    sparse: float = 200.0

    def __post_init__(self):
        for name in ("task", "repair", "sparse"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def feature_moments(H: Tensor) -> tuple[Tensor, Tensor]:
    """Column means and second central moments over the rows of ``(..., T, D)``."""
    H = T.as_tensor(H)
    if H.ndim < 2 or H.shape[-2] == 0:
        raise EmptyRegionError("no rows to take moments over")
    mu = H.mean(axis=-2)
    v = (H * H).mean(axis=-2) - mu * mu
    return mu, v


def _std(v: Tensor) -> Tensor:
    # the clamp removes tiny negative round-off from E[h^2] - mu^2
    return T.sqrt(T.maximum(v, 0.0) + VARIANCE_SHIFT)


def repair_loss(H_p: Tensor, H_o, mean_only: bool = False) -> Tensor:
    """Moment distance between student rows ``H_p`` and teacher rows ``H_o``.

    Inputs are ``(T, D)`` or batched ``(..., T, D)``; moments are taken per
    sequence and the distances averaged over the leading axes. The teacher is
    detached. ``mean_only`` drops the standard-deviation term.
    """
    H_p = T.as_tensor(H_p)
    H_o = T.stop_gradient(T.as_tensor(H_o))
    if H_p.shape[-1] != H_o.shape[-1]:
        raise ShapeError(f"feature widths differ: {H_p.shape} vs {H_o.shape}")
    D = H_p.shape[-1]
    mu_p, v_p = feature_moments(H_p)
    mu_o, v_o = feature_moments(H_o)
    dmu = mu_p - mu_o
    loss = (dmu * dmu).sum(axis=-1) * (1.0 / D)
    if not mean_only:
        ds = _std(v_p) - _std(v_o)
        loss = loss + (ds * ds).sum(axis=-1) * (1.0 / D)
    return loss.mean() if loss.ndim else loss


def retention_ratio(m_tilde) -> Tensor:
    """Fraction of the original vision tokens kept (mean over the last axis)."""
    return T.as_tensor(m_tilde).mean(axis=-1)


def layer_retention(prune_masks: dict, n_layers: int) -> list:
    """Per-decoder-layer retention given cumulative masks at the pruning layers.

    Layers before the first pruning layer count as 1; other layers inherit
    the nearest preceding pruning layer. Values are whatever
    :func:`retention_ratio` returns for the masks (tensors or arrays).
    """
    out = []
    current = None
    for layer in range(n_layers):
        if layer in prune_masks:
            current = retention_ratio(prune_masks[layer])
        out.append(current)
    return out


def average_retention(per_layer: list) -> Tensor:
    """Mean over decoder layers; ``None`` entries (before any pruning) count as 1."""
    total = None
    for r in per_layer:
        r = Tensor(1.0) if r is None else T.as_tensor(r)
        total = r if total is None else total + r
    return total * (1.0 / len(per_layer))


def sparsity_loss(r_bar, r_star: float) -> Tensor:
    return T.abs_(T.as_tensor(r_bar) - r_star)


def total_loss(task, repair, sparse, weights: LossWeights) -> Tensor:
    parts = {"task": T.as_tensor(task), "repair": T.as_tensor(repair), "sparse": T.as_tensor(sparse)}
    for name, value in parts.items():
        if not np.all(np.isfinite(value.data)):
            raise NumericError(f"{name} loss is not finite: {value.data}")
    return parts["task"] * weights.task + parts["repair"] * weights.repair + parts["sparse"] * weights.sparse


# ---------------------------------------------------------------------------
# schedules


def tau_schedule(step: int, total_steps: int, start: float = 1.5, end: float = 0.2) -> float:
    """Linear temperature anneal from ``start`` at step 0 to ``end`` at the last step."""
    if total_steps <= 1:
        return end
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return start * (1.0 - frac) + end * frac


def r_star_schedule(step: int, total_steps: int, target: float, anneal_fraction: float = 0.3,
                    start: float = 1.0) -> float:
    """Linear from ``start`` to ``target`` over the first ``anneal_fraction`` of training, then flat."""
    span = anneal_fraction * total_steps
    if span <= 0 or step >= span:
        return target
    frac = step / span
    return start * (1.0 - frac) + target * frac


def cosine_lr(step: int, total_steps: int, base: float, min_ratio: float = 0.1) -> float:
    """Cosine decay from ``base`` to ``min_ratio * base`` over ``total_steps``."""
    if total_steps <= 1:
        return base
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    lo = base * min_ratio
    return lo + 0.5 * (base - lo) * (1.0 + math.cos(math.pi * frac))
