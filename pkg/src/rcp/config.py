"""Run configuration: flat ``key = value`` text.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
Unknown keys are rejected and missing keys take the defaults below. The
resolved configuration is written back with :func:`dump_config`, and
re-parsing that text gives an equal :class:`RunConfig`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields

from .backbone import BackboneConfig, ConfigError
from .data import TaskConfig
from .layout import SequenceLayout
from .model import VARIANTS, PluginConfig
from .objectives import LossWeights

# toy placements: paper layer l of 32 maps to floor(l * 8 / 32)
PRUNE_LAYERS_WIDE = (1, 3, 6)  # 192- and 128-token budgets
PRUNE_LAYERS_TIGHT = (0, 3, 6)  # 64-token budget
TIGHT_BUDGET_BELOW = 1.0 / 6.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    # backbone
    n_layers: int = 8
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    max_len: int = 128
    # layout and task
    n_system: int = 1
    n_vision: int = 36
    n_question: int = 2
    n_answer: int = 2
    k_informative: int = 3
    n_kinds: int = 4
    n_colors: int = 4
    n_shapes: int = 4
    noise_std: float = 0.1
    # backbone pre-training
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 24
    # plug-in
    variant: str = "full"
    prune_layers: str = "auto"
    repair_layers: tuple = (5, 7)
    n_queries: int = 16
    query_dropout: float = 0.2
    bias_init: float = 2.0
    d_bottleneck: int = 8
    alpha_init: float = 1.0
    # objectives and schedules
    target_retention: float = 0.33
    anneal_fraction: float = 0.3
    tau_start: float = 1.5
    tau_end: float = 0.2
    lambda_task: float = 1.5
    lambda_repair: float = 40.0
    lambda_sparse: float = 200.0
    # optimisation
    train_examples: int = 10000
    batch_size: int = 24
    lr: float = 3e-3
    min_lr_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # evaluation and output
    eval_examples: int = 1000
    precision: str = "float64"
    output_dir: str = "run"

    def __post_init__(self):
        self.validate()

    # -- derived pieces ---------------------------------------------------

    @property
    def train_steps(self) -> int:
        return math.ceil(self.train_examples / self.batch_size)

    def resolved_prune_layers(self) -> tuple:
        if self.prune_layers == "auto":
            return PRUNE_LAYERS_TIGHT if self.target_retention < TIGHT_BUDGET_BELOW else PRUNE_LAYERS_WIDE
        return _int_tuple(self.prune_layers, "prune_layers")

    def task(self) -> TaskConfig:
        return TaskConfig(self.n_vision, self.k_informative, self.n_kinds, self.n_colors, self.n_shapes,
                          self.noise_std)

    def layout(self) -> SequenceLayout:
        return SequenceLayout(self.n_system, self.n_vision, self.n_question, self.n_answer)

    def backbone(self) -> BackboneConfig:
        task = self.task()
        return BackboneConfig(self.n_layers, self.d_model, self.n_heads, self.d_ff, task.vocab_size,
                              task.vision_dim, self.max_len)

    def plugin(self) -> PluginConfig:
        adapters, _, _, kind = VARIANTS[self.variant]
        return PluginConfig(
            prune_layers=self.resolved_prune_layers(),
            repair_layers=tuple(self.repair_layers),
            n_queries=self.n_queries,
            query_dropout=self.query_dropout,
            bias_init=self.bias_init,
            d_bottleneck=self.d_bottleneck,
            alpha_init=self.alpha_init,
            use_adapter=adapters,
            pruner=kind,
            target_retention=self.target_retention,
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_task, self.lambda_repair, self.lambda_sparse)

    @property
    def repair_loss_on(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def mean_only(self) -> bool:
        return VARIANTS[self.variant][2]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model: {self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError("precision: must be float64 or float32")
        if not 0.0 <= self.target_retention <= 1.0:
            raise ConfigError("target_retention: must lie in [0, 1]")
        if (self.n_system, self.n_question, self.n_answer) != (1, 2, 2):
            raise ConfigError("n_system/n_question/n_answer: the synthetic task uses 1, 2 and 2")
        for name in ("pretrain_steps", "pretrain_batch", "train_examples", "batch_size", "eval_examples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be positive")
        for name in ("lr", "pretrain_lr", "tau_start", "tau_end"):
            if getattr(self, name) < 0 or (name.startswith("tau") and getattr(self, name) == 0):
                raise ConfigError(f"{name}: out of range")
        try:
            self.task()
            self.backbone()
            self.plugin().validate(self.n_layers)
            self.weights()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e


def _int_tuple(text, key: str) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


def _coerce(key: str, kind, raw: str):
    raw = raw.strip()
    if kind in ("tuple", tuple):
        return _int_tuple(raw, key)
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def _types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def parse_config(text: str, **overrides) -> RunConfig:
    types = _types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{key}: unknown configuration key")
        values[key] = _coerce(key, types[key], raw)
    for key, value in overrides.items():
        if key not in types:
            raise ConfigError(f"{key}: unknown configuration key")
        values[key] = _coerce(key, types[key], str(value)) if isinstance(value, str) else value
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), **overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
