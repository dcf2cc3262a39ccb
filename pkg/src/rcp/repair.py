"""Delayed repair adapter.

Pruning layers cache a keep mask and the mean hidden state of the tokens
they discarded. A repair layer turns those caches into context vectors,
adds a per-row projection of its input, and uses the result to FiLM-modulate
a bottleneck whose output is added back on answer rows only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class RepairConfigError(ValueError):
    pass


@dataclass
class RepairContext:
    """What one pruning layer leaves behind for the adapters.

    ``keep`` is the layer keep mask over all original vision tokens
    ``(B, N)``; ``pruned_mean`` the mean hidden state of the tokens dropped at
    this layer ``(B, d)``; ``has_pruned`` marks rows where anything was dropped.
    """

    source_layer: int
    keep: Tensor
    pruned_mean: Tensor
    has_pruned: np.ndarray


def pruned_mean(h_v: Tensor, drop_weight: Tensor) -> tuple[Tensor, np.ndarray]:
    """Masked average of ``h_v`` rows under a binary ``drop_weight``; zero where nothing was dropped."""
    w = T.as_tensor(drop_weight)
    count = w.sum(axis=-1)
    # a count of binary weights; the half-way threshold ignores straight-through round-off
    has = count.data > 0.5
    safe = T.select(has, count, Tensor(np.ones_like(count.data)))
    total = (T.as_tensor(h_v) * w.reshape(w.shape + (1,))).sum(axis=-2)
    mean = total / safe.reshape(safe.shape + (1,))
    return mean, has


class RepairAdapter:
    def __init__(self, d_model: int, gen: np.random.Generator, d_bottleneck: int | None = None,
                 alpha_init: float = 1.0):
        d = d_model
        db = d_bottleneck or max(1, d // 4)
        s = 1.0 / math.sqrt(d)
        self.d_model = d
        self.d_bottleneck = db
        self.params: dict[str, Tensor] = {
            "query": T.parameter(gen.normal(0.0, s, size=d)),
            "mask_w": T.parameter(gen.normal(0.0, s, size=(d, d))),
            "mask_b": T.parameter(np.zeros(d)),
            "pruned_w": T.parameter(gen.normal(0.0, s, size=(d, d))),
            "pruned_b": T.parameter(np.zeros(d)),
            "qproj_w": T.parameter(gen.normal(0.0, s, size=(d, d))),
            "qproj_b": T.parameter(np.zeros(d)),
            "gamma_w": T.parameter(np.zeros((d, db))),
            "beta_w": T.parameter(np.zeros((d, db))),
            "down_w": T.parameter(gen.normal(0.0, s, size=(d, db))),
            "down_b": T.parameter(np.zeros(db)),
            "up_w": T.parameter(np.zeros((db, d))),
            "up_b": T.parameter(np.zeros(d)),
            "alpha": T.parameter(np.array(alpha_init)),
        }

    def encode_context(self, keep: Tensor, positions: np.ndarray, pooled: Tensor,
                       has_pruned: np.ndarray) -> tuple[Tensor, Tensor]:
        """``(e_mask, e_pruned)`` for one cached pruning layer.

        ``e_mask = proj(softmax(q . (m*P)^T) (m*P))`` with zeroed rows of
        removed positions still taking part in the softmax.
        """
        p = self.params
        keep = T.as_tensor(keep)
        mp = keep.reshape(keep.shape + (1,)) * Tensor(positions)
        att = T.softmax((mp @ p["query"].reshape(-1, 1)).reshape(keep.shape), axis=-1)
        summary = (att.reshape(att.shape[:-1] + (1, att.shape[-1])) @ mp).reshape(keep.shape[:-1] + (-1,))
        e_mask = summary @ p["mask_w"] + p["mask_b"]
        e_pruned = (T.as_tensor(pooled) @ p["pruned_w"] + p["pruned_b"]) * Tensor(
            np.asarray(has_pruned, dtype=np.float64)[..., None]
        )
        return e_mask, e_pruned

    def encode(self, ctx: RepairContext, positions: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.encode_context(ctx.keep, positions, ctx.pruned_mean, ctx.has_pruned)

    def build_conditioning(self, x: Tensor, contexts: list[tuple[Tensor, Tensor]]) -> Tensor:
        """Mean of ``e_mask + e_pruned`` over cached layers, broadcast over rows, plus ``QueryProj(x)``."""
        if not contexts:
            raise RepairConfigError("repair adapter has no pruning context to consume")
        p = self.params
        total = None
        for e_mask, e_pruned in contexts:
            part = e_mask + e_pruned
            total = part if total is None else total + part
        shared = total * (1.0 / len(contexts))
        shared = shared.reshape(shared.shape[:-1] + (1, shared.shape[-1]))
        return shared + (x @ p["qproj_w"] + p["qproj_b"])

    def film_correction(self, x: Tensor, cond: Tensor) -> Tensor:
        """``alpha * Up(gamma * GELU(Down(x)) + beta)`` with ``gamma = 1 + W_g cond``, ``beta = W_b cond``."""
        p = self.params
        gamma = 1.0 + cond @ p["gamma_w"]
        beta = cond @ p["beta_w"]
        inner = gamma * T.gelu(x @ p["down_w"] + p["down_b"]) + beta
        return p["alpha"] * (inner @ p["up_w"] + p["up_b"])

    def __call__(self, x: Tensor, contexts: list[RepairContext], positions: np.ndarray, gate: np.ndarray) -> Tensor:
        encoded = [self.encode(c, positions) for c in contexts]
        cond = self.build_conditioning(x, encoded)
        return apply_repair(x, self.film_correction(x, cond), gate)


def apply_repair(x: Tensor, delta: Tensor, gate: np.ndarray) -> Tensor:
    """``x + g * delta`` row-wise; rows with ``g == 0`` are copied from ``x`` bitwise."""
    g = np.asarray(gate) > 0.5
    g = np.broadcast_to(g[..., None], x.shape)
    return T.select(g, T.as_tensor(x) + delta, x)
