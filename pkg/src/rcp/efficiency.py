"""Analytic cost accounting, retention tables and layer-wise drift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import SequenceLayout
from .objectives import repair_loss

FLOPS_FORMULA = "flops = sum_l [ 8*s_l*d^2 + 4*s_l^2*d + 4*s_l*d*d_ff ]"
KV_FORMULA = "kv_bytes = sum_l [ s_l * 2 * d * bytes_per_element ]"


class TraceMismatchError(ValueError):
    pass


class RetentionOrderError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    seq_lengths: tuple  # s_l per decoder layer
    bytes_per_element: int = 8

    def __post_init__(self):
        if len(self.seq_lengths) != self.n_layers:
            raise ValueError(f"{len(self.seq_lengths)} sequence lengths for {self.n_layers} layers")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


def seq_lengths(layout: SequenceLayout, per_layer_retention, include_text: bool = True) -> tuple:
    """``s_l`` = non-vision tokens + retained vision tokens at each layer.

    With ``include_text=False`` only the retained vision tokens are counted,
    which is the visual-token cache that the storage ratios compare.
    """
    fixed = layout.length - layout.n_vision if include_text else 0
    return tuple(fixed + float(r) * layout.n_vision for r in per_layer_retention)


def flops_total(cm: CostModel) -> float:
    d, f = cm.d_model, cm.d_ff
    total = 0.0
    for s in cm.seq_lengths:
        total += 8 * s * d * d + 4 * s * s * d + 4 * s * d * f
    return total


def kv_cache_bytes(cm: CostModel) -> float:
    return sum(s * 2 * cm.d_model * cm.bytes_per_element for s in cm.seq_lengths)


def layer_drift(teacher_trace, student_trace) -> list[tuple[int, float]]:
    """Moment distance between teacher and student answer rows per layer, averaged over examples."""
    if len(teacher_trace.hidden) != len(student_trace.hidden):
        raise TraceMismatchError(
            f"teacher has {len(teacher_trace.hidden)} layers, student {len(student_trace.hidden)}"
        )
    out = []
    for l, (ht, hs) in enumerate(zip(teacher_trace.hidden, student_trace.hidden)):
        at = teacher_trace.layouts[l].answer_span()
        as_ = student_trace.layouts[l].answer_span()
        H_o = np.asarray(getattr(ht, "data", ht))[:, at.start : at.stop]
        H_p = np.asarray(getattr(hs, "data", hs))[:, as_.start : as_.stop]
        out.append((l, repair_loss(H_p, H_o).item()))
    return out


def retention_report(per_layer_retention, prune_layers, target: float | None = None) -> list[dict]:
    """Retention percentage at each pruning layer.

    Raises :class:`RetentionOrderError` if retention ever grows with depth.
    """
    r = np.asarray(per_layer_retention, dtype=np.float64)
    if np.any(np.diff(r) > 0):
        raise RetentionOrderError(f"retention increases with depth: {r.tolist()}")
    return [{"target": target, "layer": int(l), "percent": 100.0 * float(r[l])} for l in prune_layers]
