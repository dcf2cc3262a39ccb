"""Pruners and repair adapters plugged into a frozen backbone.

The plug-in runs as backbone hooks. At each pruning layer it scores the
surviving vision tokens, samples (training) or thresholds (inference) a keep
mask, folds it into the cumulative mask and caches a repair context. After
each repair layer the adapter corrects the answer rows.

Two execution modes share all of the scoring code. ``masked`` keeps the
sequence length fixed and zeroes the attention weight of dead keys, so
gradients reach every mask. ``gathered`` physically removes the dead rows
and runs one example at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import tensor as T
from .backbone import Backbone, aggregate_vision_attention
from .data import PAD
from .layout import SequenceLayout, attention_subblock, build_gate
from .pruner import Pruner, intrinsic_score, query_dropout_mask, sample_mask_train, threshold_mask_infer
from .repair import RepairAdapter, RepairConfigError, RepairContext, pruned_mean
from .tensor import ShapeError, Tensor

# variant -> (adapters on, repair loss on, mean-only repair loss, pruner kind)
VARIANTS = {
    "full": (True, True, False, "learned"),
    "pruner-only": (False, False, False, "learned"),
    "no-adapter": (False, True, False, "learned"),
    "no-repair-loss": (True, False, False, "learned"),
    "mean-only-repair": (True, True, True, "learned"),
    "topk": (True, True, False, "topk"),
}


@dataclass(frozen=True)
class PluginConfig:
    prune_layers: tuple = (1, 3, 6)
    repair_layers: tuple = (5, 7)
    n_queries: int = 16
    query_dropout: float = 0.2
    bias_init: float = 2.0
    d_bottleneck: int | None = None
    alpha_init: float = 1.0
    use_adapter: bool = True
    pruner: str = "learned"
    target_retention: float = 1.0

    def validate(self, n_layers: int) -> None:
        prune = list(self.prune_layers)
        if not prune:
            raise RepairConfigError("at least one pruning layer is required")
        if prune != sorted(set(prune)) or prune[0] < 0 or prune[-1] >= n_layers:
            raise RepairConfigError(f"prune_layers {prune} must be increasing indices in [0, {n_layers})")
        repair = list(self.repair_layers)
        if repair != sorted(set(repair)) or (repair and repair[-1] >= n_layers):
            raise RepairConfigError(f"repair_layers {repair} must be increasing indices in [0, {n_layers})")
        if repair and repair[0] < prune[0]:
            raise RepairConfigError(f"repair layer {repair[0]} runs before the first pruning layer {prune[0]}")
        if self.pruner not in ("learned", "topk"):
            raise RepairConfigError(f"unknown pruner kind {self.pruner!r}")
        if not 0.0 <= self.query_dropout < 1.0:
            raise RepairConfigError("query_dropout must lie in [0, 1)")


def topk_stage_fraction(prune_layers, n_layers: int, target: float) -> float:
    """Per-stage keep fraction ``rho`` whose cumulative schedule averages to ``target``.

    Stage ``j`` keeps ``rho**(j+1)`` of the original tokens; layers before the
    first stage count as fully kept.
    """
    bounds = list(prune_layers) + [n_layers]

    def r_bar(rho):
        total = float(bounds[0])
        for j in range(len(prune_layers)):
            total += (bounds[j + 1] - bounds[j]) * rho ** (j + 1)
        return total / n_layers

    if r_bar(1.0) <= target:
        return 1.0
    if r_bar(0.0) >= target:
        return 0.0
    return brentq(lambda rho: r_bar(rho) - target, 0.0, 1.0, xtol=1e-14)


def topk_keep_counts(prune_layers, n_layers: int, n_vision: int, target: float) -> list[int]:
    rho = topk_stage_fraction(prune_layers, n_layers, target)
    return [max(1, int(round(n_vision * rho ** (j + 1)))) for j in range(len(prune_layers))]


class RCPModel:
    def __init__(self, backbone: Backbone, layout: SequenceLayout, config: PluginConfig | None = None,
                 seed: int = 0):
        self.backbone = backbone
        self.layout = layout
        self.config = config or PluginConfig()
        n_layers = backbone.config.n_layers
        self.config.validate(n_layers)
        d = backbone.config.d_model
        gen = np.random.default_rng(seed)
        c = self.config
        self.pruners: dict[int, Pruner] = {}
        if c.pruner == "learned":
            self.pruners = {l: Pruner(d, gen, c.n_queries, bias_init=c.bias_init) for l in c.prune_layers}
        self.adapters: dict[int, RepairAdapter] = {}
        if c.use_adapter:
            self.adapters = {l: RepairAdapter(d, gen, c.d_bottleneck, c.alpha_init) for l in c.repair_layers}
        self.topk_counts = topk_keep_counts(c.prune_layers, n_layers, layout.n_vision, c.target_retention)
        v = layout.vision_span()
        self.vision_positions = backbone.params["pos"].data[v.start : v.stop]

    @property
    def prune_layers(self) -> tuple:
        return tuple(self.config.prune_layers)

    @property
    def repair_layers(self) -> tuple:
        return tuple(self.config.repair_layers)

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for l, p in self.pruners.items():
            out.update({f"pruner.{l}.{k}": v for k, v in p.params.items()})
        for l, a in self.adapters.items():
            out.update({f"adapter.{l}.{k}": v for k, v in a.params.items()})
        return out

    def load_trainable(self, values: dict[str, np.ndarray]) -> None:
        params = self.trainable()
        missing = sorted(set(params) - set(values))
        if missing:
            raise KeyError(f"plug-in checkpoint lacks {missing[:3]}")
        for k, p in params.items():
            if np.shape(values[k]) != p.shape:
                raise ValueError(f"{k}: shape {np.shape(values[k])} != {p.shape}")
            p.data = np.array(values[k], dtype=p.data.dtype)

    # -- forwards ---------------------------------------------------------

    def teacher(self, tokens, vision):
        """Full-token backbone pass, no hooks."""
        return self.backbone.forward(tokens, vision, self.layout)

    def student(self, tokens, vision, *, gathered: bool = False, training: bool = False, tau: float = 1.0,
                rng: T.Rng | None = None, step: int = 0, forced_masks: dict | None = None):
        """Pruned pass; returns ``(logits, state, hooks)``."""
        if training and rng is None and forced_masks is None:
            raise ValueError("training forward needs an Rng")
        hooks = RCPHooks(self, len(tokens), training=training, tau=tau, rng=rng, step=step,
                         forced_masks=forced_masks)
        logits, state = self.backbone.forward(tokens, vision, self.layout, gathered=gathered, hooks=(hooks,))
        return logits, state, hooks


@dataclass
class RCPHooks:
    """Per-forward pruning and repair state.

    ``masks[l]`` holds the cumulative keep mask after pruning layer ``l`` as a
    tensor over all original vision tokens (straight-through values while
    training); ``hard[l]`` is the same mask as a plain array.
    """

    model: RCPModel
    batch_size: int
    training: bool = False
    tau: float = 1.0
    rng: T.Rng | None = None
    step: int = 0
    forced_masks: dict | None = None
    masks: dict = field(default_factory=dict)
    hard: dict = field(default_factory=dict)
    logits: dict = field(default_factory=dict)
    contexts: list = field(default_factory=list)

    def __post_init__(self):
        self.n_vision = self.model.layout.n_vision
        self.cum = np.ones((self.batch_size, self.n_vision))
        self.cum_t: Tensor | None = None

    def before_attention(self, bb: Backbone, layer: int, state) -> None:
        if layer not in self.model.prune_layers:
            return
        lay = state.layout
        ids = state.vision_ids
        alive = self.cum[:, ids]
        v = lay.vision_span()
        h_v = state.h[:, v.start : v.stop, :]
        if self.forced_masks is not None:
            forced = np.asarray(self.forced_masks[layer], dtype=np.float64)
            if forced.shape != (self.batch_size, self.n_vision):
                raise ShapeError(f"mask for layer {layer} has shape {forced.shape}, "
                                 f"expected {(self.batch_size, self.n_vision)}")
            m = Tensor(forced[:, ids] * alive)
        elif len(ids) == 0:
            m = Tensor(np.zeros((self.batch_size, 0)))
        elif self.model.config.pruner == "topk":
            m = Tensor(self._topk(bb, layer, state, alive))
        else:
            m = self._learned(bb, layer, state, alive, h_v)

        keep = (m.data > 0.5) & (alive > 0.5)
        new_cum = self.cum.copy()
        new_cum[:, ids] = keep
        drop_weight = Tensor(alive) * (1.0 - m)
        pooled, has = pruned_mean(h_v, drop_weight)
        m_full = m if not state.gathered else T.scatter(m, ids, self.n_vision)
        self.cum_t = m_full if self.cum_t is None else self.cum_t * m_full
        self.masks[layer] = self.cum_t
        self.hard[layer] = new_cum
        self.cum = new_cum
        self.contexts.append(RepairContext(layer, m_full, pooled, has))

        if state.gathered:
            state.remove_vision_rows(np.flatnonzero(keep[0]))
        else:
            B, L = self.batch_size, lay.length
            state.key_weight = T.concat(
                [Tensor(np.ones((B, v.start))), self.cum_t, Tensor(np.ones((B, L - v.stop)))], axis=1
            )

    def _learned(self, bb, layer, state, alive, h_v) -> Tensor:
        model = self.model
        pruner = model.pruners[layer]
        lay = state.layout
        keys = bb.vision_keys(layer, state.h, lay)
        state.trace.vision_keys[layer] = keys.data
        safe = np.where(alive.sum(-1, keepdims=True) == 0, 1.0, alive)
        if layer == 0:
            A = np.zeros_like(alive)
        else:
            a = aggregate_vision_attention(state.trace, layer - 1, self.n_vision)[:, state.vision_ids]
            # a frozen-model statistic: carries no gradient
            A = T.stop_gradient(Tensor(intrinsic_score(a, safe))).data
        keep_q = None
        rate = model.config.query_dropout
        if self.training and rate > 0:
            keep_q = query_dropout_mask(self.rng.stream("query_dropout", self.step, layer),
                                        (self.batch_size, pruner.n_queries), rate)
        q = lay.question_span()
        logits = pruner.logits(A, h_v, state.h[:, q.start : q.stop, :], lay.q_effective, keys, alive, keep_q)
        self.logits[layer] = logits.data
        if self.training:
            noise = T.logistic_noise(self.rng.stream("gumbel", self.step, layer), (self.batch_size, self.n_vision))
            return sample_mask_train(logits, self.tau, noise[:, state.vision_ids])
        return Tensor(threshold_mask_infer(logits.data, self.tau))

    def _topk(self, bb, layer, state, alive) -> np.ndarray:
        """Keep the surviving tokens with the largest question-to-vision attention of this layer."""
        stage = self.model.prune_layers.index(layer)
        budget = self.model.topk_counts[stage]
        _, probs = bb.attention(layer, state.h, state.positions, state.key_weight)
        a = attention_subblock(probs.data, state.layout).mean(axis=(-3, -2))
        m = np.zeros_like(alive)
        for b in range(alive.shape[0]):
            live = np.flatnonzero(alive[b] > 0.5)
            # stable sort on -a: ties keep the earliest tokens
            order = live[np.argsort(-a[b, live], kind="stable")]
            m[b, order[:budget]] = 1.0
        return m

    def after_layer(self, bb: Backbone, layer: int, state) -> None:
        adapter = self.model.adapters.get(layer)
        if adapter is None:
            return
        gate = build_gate(state.layout)
        state.h = adapter(state.h, self.contexts, self.model.vision_positions, gate)

    # -- summaries --------------------------------------------------------

    def hard_per_layer(self, n_layers: int) -> np.ndarray:
        """Cumulative hard masks for every decoder layer, ``(n_layers, B, N)``; ones before pruning starts."""
        out = np.ones((n_layers, self.batch_size, self.n_vision))
        current = None
        for l in range(n_layers):
            if l in self.hard:
                current = self.hard[l]
            if current is not None:
                out[l] = current
        return out


def answer_logits(logits: Tensor, state) -> np.ndarray:
    a = state.layout.answer_span()
    return logits.data[:, a.start : a.stop]


def greedy_decode(run, tokens: np.ndarray, layout: SequenceLayout) -> np.ndarray:
    """Greedy answer tokens under the given prompt.

    ``run(tokens)`` must return answer-row logits ``(B, n_answer, V)``. The
    answer segment is refilled one token at a time with the model's own
    predictions, so nothing past the prompt is taken from ``tokens``.
    """
    a = layout.answer_span()
    tok = np.array(tokens, copy=True)
    tok[:, a.start + 1 : a.stop] = PAD
    preds = np.zeros((tok.shape[0], layout.n_answer), dtype=np.int64)
    for j in range(layout.n_answer):
        preds[:, j] = run(tok)[:, j].argmax(-1)
        if a.start + 1 + j < a.stop:
            tok[:, a.start + 1 + j] = preds[:, j]
    return preds
