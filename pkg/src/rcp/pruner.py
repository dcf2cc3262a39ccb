"""Residual cross-attention pruner and cumulative keep masks.

Retention logits are the sum of three streams and a bias:

* ``A``   centred log of the frozen model's question-to-vision attention,
* ``S_a`` question-conditioned learnable queries attending over vision keys,
* ``S_t`` a per-token MLP score,

and dead tokens are pinned to ``-inf`` so they can never come back.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from . import tensor as T
from .tensor import Tensor

ATTENTION_FLOOR = 1e-9


class EmptyQuestionError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


def condition_queries(queries: Tensor, question_hidden: Tensor, q_effective: int) -> Tensor:
    """Add the mean of the first ``q_effective`` question states to every query row.

    ``queries`` is ``(N_q, d)``; ``question_hidden`` is ``(..., n_question, d)``.
    Returns ``(..., N_q, d)``.
    """
    if q_effective < 1:
        raise EmptyQuestionError("q_effective must be at least 1")
    hq = T.as_tensor(question_hidden)[..., :q_effective, :]
    summary = hq.sum(axis=-2, keepdims=True) * (1.0 / q_effective)
    return queries + summary


def aggregation_weights(logits: Tensor, keep_queries: np.ndarray | None = None) -> Tensor:
    """Softmax over query logits; dropped queries are zeroed and survivors renormalised."""
    w = T.softmax(logits, axis=-1)
    if keep_queries is None:
        return w
    w = w * Tensor(keep_queries)
    return w / w.sum(axis=-1, keepdims=True)


def query_dropout_mask(gen: np.random.Generator, shape, rate: float) -> np.ndarray:
    keep = (gen.random(shape) >= rate).astype(np.float64)
    # a fully dropped row keeps everything
    dead = keep.sum(axis=-1, keepdims=True) == 0
    return np.where(dead, 1.0, keep)


def cross_attention_score(
    conditioned: Tensor,
    keys: Tensor,
    weights: Tensor,
    alive: np.ndarray | None = None,
) -> Tensor:
    """``Aggregate(softmax(Q' K^T / sqrt(d)))`` as a per-token score.

    ``conditioned`` is ``(..., N_q, d)``, ``keys`` ``(..., N, d)`` and
    ``weights`` the aggregation weights ``(..., N_q)``. Keys with
    ``alive == 0`` are excluded from the softmax.
    """
    d = keys.shape[-1]
    scores = (conditioned @ T.as_tensor(keys).swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    if alive is not None:
        dead = (np.asarray(alive) <= 0.5)[..., None, :]
        scores = T.masked_fill(scores, dead, -np.inf)
    rows = T.softmax(scores, axis=-1)
    w = T.as_tensor(weights)
    return (rows * w.reshape(w.shape + (1,))).sum(axis=-2)


def intrinsic_score(a, m_tilde) -> np.ndarray:
    """``log a_i`` centred by its mean over retained tokens.

    ``a`` is clamped to ``ATTENTION_FLOOR`` first, since removed keys carry
    exact zeros.
    """
    a = np.maximum(np.asarray(a, dtype=np.float64), ATTENTION_FLOOR)
    m = np.asarray(m_tilde, dtype=np.float64)
    count = m.sum(axis=-1, keepdims=True)
    if np.any(count == 0):
        raise DegenerateMaskError("no retained tokens to centre over")
    la = np.log(a)
    return la - (m * la).sum(axis=-1, keepdims=True) / count


def combine_logits(A, S_a: Tensor, S_t: Tensor, bias: Tensor, m_tilde) -> Tensor:
    logits = T.as_tensor(A) + S_a + S_t + bias
    dead = np.asarray(m_tilde) <= 0.5
    return T.masked_fill(logits, dead, -np.inf)


def sample_mask_train(logits: Tensor, tau: float, noise: np.ndarray) -> Tensor:
    """Gumbel-Sigmoid relaxation with a hard straight-through forward value."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    y_soft = T.sigmoid((logits + Tensor(noise)) * (1.0 / tau))
    return T.straight_through(y_soft)


def threshold_mask_infer(logits, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    return (expit(z / tau) > 0.5).astype(np.float64)


def update_cumulative(m_tilde_prev, m):
    return m_tilde_prev * m


class Pruner:
    """Learnable parameters of one pruning layer."""

    def __init__(self, d_model: int, gen: np.random.Generator, n_queries: int = 16, d_proj: int | None = None,
                 bias_init: float = 2.0):
        d = d_model
        dp = d_proj or max(1, d // 2)
        self.d_model = d
        self.params: dict[str, Tensor] = {
            "queries": T.parameter(gen.normal(0.0, 1.0 / math.sqrt(d), size=(n_queries, d))),
            "agg": T.parameter(np.zeros(n_queries)),
            "key_proj": T.parameter(np.eye(d) + gen.normal(0.0, 0.1 / math.sqrt(d), size=(d, d))),
            "proj_w": T.parameter(gen.normal(0.0, 1.0 / math.sqrt(d), size=(d, dp))),
            "proj_b": T.parameter(np.zeros(dp)),
            "mlp_w1": T.parameter(gen.normal(0.0, 1.0 / math.sqrt(dp), size=(dp, dp))),
            "mlp_b1": T.parameter(np.zeros(dp)),
            "mlp_w2": T.parameter(gen.normal(0.0, 0.1 / math.sqrt(dp), size=(dp, 1))),
            "mlp_b2": T.parameter(np.zeros(1)),
            "bias": T.parameter(np.array(bias_init)),
        }

    @property
    def n_queries(self) -> int:
        return self.params["queries"].shape[0]

    def token_score(self, h_v: Tensor) -> Tensor:
        """Per-token ``MLP(proj(h_v))``, shape ``(..., N)``."""
        p = self.params
        x = T.as_tensor(h_v) @ p["proj_w"] + p["proj_b"]
        x = T.gelu(x @ p["mlp_w1"] + p["mlp_b1"])
        out = x @ p["mlp_w2"] + p["mlp_b2"]
        return out.reshape(out.shape[:-1])

    def attention_score(self, question_hidden: Tensor, q_effective: int, keys: Tensor, alive,
                        keep_queries: np.ndarray | None = None) -> Tensor:
        p = self.params
        conditioned = condition_queries(p["queries"], question_hidden, q_effective)
        weights = aggregation_weights(p["agg"], keep_queries)
        return cross_attention_score(conditioned, T.as_tensor(keys) @ p["key_proj"], weights, alive)

    def logits(self, A, h_v: Tensor, question_hidden: Tensor, q_effective: int, keys: Tensor, m_tilde,
               keep_queries: np.ndarray | None = None) -> Tensor:
        m_tilde = np.asarray(m_tilde)
        # rows with nothing left still need a well-defined softmax; combine_logits masks them anyway
        empty = m_tilde.sum(axis=-1, keepdims=True) == 0
        S_a = self.attention_score(question_hidden, q_effective, keys, np.where(empty, 1.0, m_tilde), keep_queries)
        S_t = self.token_score(h_v)
        return combine_logits(A, S_a, S_t, self.params["bias"], m_tilde)
