"""Small causal transformer decoder used as the frozen language model.

The forward pass exposes two hook points per layer: ``before_attention``
(token pruning) and ``after_layer`` (repair). Pruning either multiplies the
attention key weights by a keep mask (training path, sequence length fixed)
or removes rows from the hidden states (inference path).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .layout import SequenceLayout, attention_subblock
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 8
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 16
    vision_dim: int = 13
    max_len: int = 128

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "vision_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerTrace:
    """Per-layer record of one forward pass.

    ``hidden[l]`` is the output of layer ``l`` (after any repair),
    ``attention[l]`` the attention weights ``(B, H, L, L)``,
    ``vision_keys[l]`` the layer's key projection of the vision rows entering
    it (recorded at pruning layers only), and ``positions[l]`` the original
    sequence positions of the rows at layer ``l`` (shorter than ``L`` once
    rows are physically removed).
    """

    hidden: list = field(default_factory=list)
    attention: list = field(default_factory=list)
    vision_keys: dict = field(default_factory=dict)
    positions: list = field(default_factory=list)
    layouts: list = field(default_factory=list)
    vision_ids: list = field(default_factory=list)


@dataclass
class ForwardState:
    h: Tensor
    layout: SequenceLayout
    positions: np.ndarray
    vision_ids: np.ndarray
    gathered: bool
    key_weight: Tensor | None = None
    trace: LayerTrace = field(default_factory=LayerTrace)
    extras: dict = field(default_factory=dict)

    def remove_vision_rows(self, keep_local: np.ndarray) -> None:
        """Physically drop vision rows not in ``keep_local`` (indices within the current vision segment)."""
        v = self.layout.vision_span()
        keep_local = np.asarray(keep_local, dtype=np.int64)
        rows = np.concatenate([
            np.arange(0, v.start),
            v.start + keep_local,
            np.arange(v.stop, self.layout.length),
        ])
        self.h = T.gather_rows(self.h, rows)
        self.positions = self.positions[rows]
        self.vision_ids = self.vision_ids[keep_local]
        self.layout = self.layout.with_vision(len(keep_local))


def _init_linear(gen: np.random.Generator, n_in: int, n_out: int, scale: float = 1.0) -> np.ndarray:
    return gen.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out))


class Backbone:
    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params: dict[str, Tensor] = {k: Tensor(np.array(v)) for k, v in params.items()}

    def _init_params(self, gen: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.config
        d = c.d_model
        p = {
            "embed": gen.normal(0.0, 1.0, size=(c.vocab_size, d)),
            "pos": gen.normal(0.0, 0.3, size=(c.max_len, d)),
            "vis_w": _init_linear(gen, c.vision_dim, d),
            "vis_b": np.zeros(d),
            "lnf_g": np.ones(d),
            "lnf_b": np.zeros(d),
            "unembed": _init_linear(gen, d, c.vocab_size),
        }
        resid_scale = 1.0 / math.sqrt(2 * c.n_layers)
        for i in range(c.n_layers):
            pre = f"layers.{i}."
            p[pre + "ln1_g"] = np.ones(d)
            p[pre + "ln1_b"] = np.zeros(d)
            p[pre + "wq"] = _init_linear(gen, d, d)
            p[pre + "wk"] = _init_linear(gen, d, d)
            p[pre + "wv"] = _init_linear(gen, d, d)
            p[pre + "wo"] = _init_linear(gen, d, d, resid_scale)
            p[pre + "ln2_g"] = np.ones(d)
            p[pre + "ln2_b"] = np.zeros(d)
            p[pre + "w1"] = _init_linear(gen, d, c.d_ff)
            p[pre + "b1"] = np.zeros(c.d_ff)
            p[pre + "w2"] = _init_linear(gen, c.d_ff, d, resid_scale)
            p[pre + "b2"] = np.zeros(d)
        return p

    # -- parameters -------------------------------------------------------

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def digest(self) -> str:
        return params_digest(self.numpy_params())

    def _p(self, layer: int, name: str) -> Tensor:
        return self.params[f"layers.{layer}.{name}"]

    # -- pieces -----------------------------------------------------------

    def embed(self, tokens: np.ndarray, vision: np.ndarray, layout: SequenceLayout) -> Tensor:
        """Input embeddings: token table for text rows, linear map for vision rows, plus positions."""
        tokens = np.asarray(tokens)
        if tokens.max(initial=0) >= self.config.vocab_size:
            raise ConfigError("token id outside vocabulary")
        if layout.length > self.config.max_len:
            raise ConfigError(f"sequence length {layout.length} exceeds max_len {self.config.max_len}")
        v = layout.vision_span()
        before = self.params["embed"][tokens[:, : v.start]]
        after = self.params["embed"][tokens[:, v.stop :]]
        vis = T.as_tensor(vision) @ self.params["vis_w"] + self.params["vis_b"]
        h = T.concat([before, vis, after], axis=1)
        return h + self.params["pos"][: layout.length]

    def vision_keys(self, layer: int, h: Tensor, layout: SequenceLayout) -> Tensor:
        """Key projection of layer ``layer`` applied to the vision rows of ``h``."""
        v = layout.vision_span()
        hv = h[:, v.start : v.stop, :]
        x = T.layer_norm(hv, self._p(layer, "ln1_g"), self._p(layer, "ln1_b"))
        return x @ self._p(layer, "wk")

    def attention(self, layer: int, h: Tensor, positions: np.ndarray, key_weight: Tensor | None):
        c = self.config
        B, L, d = h.shape
        H, dh = c.n_heads, c.head_dim
        x = T.layer_norm(h, self._p(layer, "ln1_g"), self._p(layer, "ln1_b"))

        def heads(w):
            return (x @ w).reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self._p(layer, "wq")), heads(self._p(layer, "wk")), heads(self._p(layer, "wv"))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        future = positions[None, :] > positions[:, None]
        if key_weight is None:
            key_weight = Tensor(np.ones((B, L)))
        probs = T.weighted_softmax(scores, key_weight.reshape(B, 1, 1, L), blocked=future)
        out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, d) @ self._p(layer, "wo")
        return out, probs

    def mlp(self, layer: int, h: Tensor) -> Tensor:
        x = T.layer_norm(h, self._p(layer, "ln2_g"), self._p(layer, "ln2_b"))
        x = T.gelu(x @ self._p(layer, "w1") + self._p(layer, "b1"))
        return x @ self._p(layer, "w2") + self._p(layer, "b2")

    def head(self, h: Tensor) -> Tensor:
        x = T.layer_norm(h, self.params["lnf_g"], self.params["lnf_b"])
        return x @ self.params["unembed"]

    # -- forward ----------------------------------------------------------

    def forward(self, tokens, vision, layout: SequenceLayout, *, gathered: bool = False, hooks=()):
        """Run the decoder; returns ``(logits, state)`` with ``state.trace`` filled.

        With no hooks this is the full-token teacher pass. ``gathered`` selects
        physical row removal for hooks that prune.
        """
        h = self.embed(tokens, vision, layout)
        if gathered and h.shape[0] != 1:
            raise ConfigError("gathered forward runs one example at a time")
        state = ForwardState(
            h=h,
            layout=layout,
            positions=np.arange(layout.length),
            vision_ids=np.arange(layout.n_vision),
            gathered=gathered,
        )
        for layer in range(self.config.n_layers):
            for hook in hooks:
                hook.before_attention(self, layer, state)
            out, probs = self.attention(layer, state.h, state.positions, state.key_weight)
            h = state.h + out
            state.h = h + self.mlp(layer, h)
            state.trace.attention.append(probs.data)
            state.trace.positions.append(state.positions)
            state.trace.layouts.append(state.layout)
            state.trace.vision_ids.append(state.vision_ids)
            for hook in hooks:
                hook.after_layer(self, layer, state)
            state.trace.hidden.append(state.h)
        return self.head(state.h), state


def aggregate_vision_attention(trace: LayerTrace, layer: int, n_vision: int) -> np.ndarray:
    """Mean question-to-vision attention per original vision token, shape ``(B, n_vision)``.

    Averages over heads and the effective question rows of layer ``layer``.
    Tokens no longer present in the sequence report 0.
    """
    if not 0 <= layer < len(trace.attention):
        raise ConfigError(f"no attention recorded for layer {layer}")
    block = attention_subblock(trace.attention[layer], trace.layouts[layer])
    a_local = block.mean(axis=(-3, -2))
    out = np.zeros(a_local.shape[:-1] + (n_vision,))
    out[..., trace.vision_ids[layer]] = a_local
    return out


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def config_dict(config: BackboneConfig) -> dict:
    return asdict(config)
