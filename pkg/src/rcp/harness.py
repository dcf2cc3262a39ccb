"""Backbone pre-training, plug-in training and evaluation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .config import RunConfig
from .data import Batch, generate_batch
from .model import RCPModel, answer_logits, greedy_decode
from .objectives import (
    LossWeights,
    average_retention,
    cosine_lr,
    layer_retention,
    r_star_schedule,
    repair_loss,
    sparsity_loss,
    tau_schedule,
    total_loss,
)
from .optim import Adam
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "task_loss", "repair_loss", "sparse_loss", "r_bar", "tau", "r_star", "lr")


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.precision == "float32" else np.float64


def eval_batch(cfg: RunConfig, n: int | None = None) -> Batch:
    """The held-out split: a fixed stream independent of the training draws."""
    return generate_batch(T.Rng(cfg.seed).stream("eval"), cfg.task(), n or cfg.eval_examples)


# ---------------------------------------------------------------------------
# backbone


def backbone_predict(backbone: Backbone, batch: Batch, chunk: int = 250) -> np.ndarray:
    preds = []
    for i in range(0, len(batch), chunk):
        part = batch.subset(np.arange(i, min(i + chunk, len(batch))))

        def run(tok, part=part):
            logits, state = backbone.forward(tok, part.vision, part.layout)
            return answer_logits(logits, state)

        preds.append(greedy_decode(run, part.tokens, part.layout))
    return np.concatenate(preds)


def exact_match(preds: np.ndarray, targets: np.ndarray) -> float:
    return float((preds == targets).all(axis=1).mean())


def pretrain(cfg: RunConfig, steps: int | None = None) -> tuple[Backbone, float]:
    """Supervised full-token training of the backbone; returns it frozen, in 64-bit, with eval accuracy."""
    steps = cfg.pretrain_steps if steps is None else steps
    task, layout = cfg.task(), cfg.layout()
    rng = T.Rng(cfg.seed)
    a = layout.answer_span()
    with T.precision(_dtype(cfg)):
        bb = Backbone(cfg.backbone(), seed=int(rng.stream("backbone-init").integers(2**63)))
        bb.set_trainable(True)
        opt = Adam(bb.params, lr=cfg.pretrain_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        for step in range(steps):
            batch = generate_batch(rng.stream("pretrain-data", step), task, cfg.pretrain_batch)
            logits, _ = bb.forward(batch.tokens, batch.vision, layout)
            loss = T.cross_entropy(logits[:, a.start : a.stop, :], batch.targets)
            if not np.isfinite(loss.item()):
                raise NumericError(f"pre-training loss is not finite at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(cosine_lr(step, steps, cfg.pretrain_lr, cfg.min_lr_ratio))
            if step % 250 == 0:
                log.info("pretrain step %d loss %.4f", step, loss.item())
    frozen = Backbone(cfg.backbone(), params={k: np.asarray(v, dtype=np.float64) for k, v in bb.numpy_params().items()})
    acc = exact_match(backbone_predict(frozen, eval_batch(cfg)), eval_batch(cfg).targets)
    return frozen, acc


# ---------------------------------------------------------------------------
# plug-in training


def build_model(cfg: RunConfig, backbone: Backbone) -> RCPModel:
    """Plug-in around a working copy of ``backbone`` in the run precision."""
    work = Backbone(backbone.config, params=backbone.numpy_params())
    work.set_trainable(False)
    return RCPModel(work, cfg.layout(), cfg.plugin(), seed=int(T.Rng(cfg.seed).stream("plugin-init").integers(2**63)))


def step_losses(model: RCPModel, batch: Batch, teacher_state, logits: Tensor, state, hooks, r_star: float,
                mean_only: bool = False) -> dict:
    """Task, repair and sparsity losses of one student pass, plus the batch-mean retention."""
    a = batch.layout.answer_span()
    task = T.cross_entropy(logits[:, a.start : a.stop, :], batch.targets)
    repair = Tensor(0.0)
    layers = model.repair_layers
    for l in layers:
        H_p = state.trace.hidden[l][:, a.start : a.stop, :]
        H_o = teacher_state.trace.hidden[l][:, a.start : a.stop, :]
        repair = repair + repair_loss(H_p, H_o, mean_only=mean_only)
    if layers:
        repair = repair * (1.0 / len(layers))
    per_layer = layer_retention(hooks.masks, model.backbone.config.n_layers)
    r_bar = average_retention(per_layer).mean()
    return {"task": task, "repair": repair, "sparse": sparsity_loss(r_bar, r_star), "r_bar": r_bar}


@dataclass
class TrainResult:
    model: RCPModel
    metrics: list = field(default_factory=list)
    digest_before: str = ""
    digest_after: str = ""
    monotonic_violations: int = 0
    reappearances: int = 0

    @property
    def final(self) -> dict:
        return self.metrics[-1]


def mask_violations(hard_per_layer: np.ndarray) -> tuple[int, int]:
    """Counts of (retention increases with depth, dropped tokens coming back) in ``(layers, B, N)`` masks."""
    r = hard_per_layer.mean(axis=-1)
    increases = int((np.diff(r, axis=0) > 0).sum())
    back = int(((hard_per_layer[:-1] < 0.5) & (hard_per_layer[1:] > 0.5)).sum())
    return increases, back


def train(cfg: RunConfig, backbone: Backbone, steps: int | None = None, metrics_path=None) -> TrainResult:
    steps = cfg.train_steps if steps is None else steps
    task, layout = cfg.task(), cfg.layout()
    weights = cfg.weights()
    if not cfg.repair_loss_on:
        weights = LossWeights(weights.task, 0.0, weights.sparse)
    rng = T.Rng(cfg.seed)
    with T.precision(_dtype(cfg)):
        model = build_model(cfg, backbone)
        result = TrainResult(model, digest_before=model.backbone.digest())
        params = model.trainable()
        opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        for step in range(steps):
            tau = tau_schedule(step, steps, cfg.tau_start, cfg.tau_end)
            r_star = r_star_schedule(step, steps, cfg.target_retention, cfg.anneal_fraction)
            lr = cosine_lr(step, steps, cfg.lr, cfg.min_lr_ratio)
            batch = generate_batch(rng.stream("train-data", step), task, cfg.batch_size)
            _, teacher_state = model.teacher(batch.tokens, batch.vision)
            logits, state, hooks = model.student(batch.tokens, batch.vision, training=True, tau=tau, rng=rng,
                                                 step=step)
            parts = step_losses(model, batch, teacher_state, logits, state, hooks, r_star, cfg.mean_only)
            try:
                loss = total_loss(parts["task"], parts["repair"], parts["sparse"], weights)
            except NumericError as e:
                raise NumericError(f"step {step} (tau={tau:.4f}, r*={r_star:.4f}, lr={lr:.3g}): {e}") from e
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            inc, back = mask_violations(hooks.hard_per_layer(cfg.n_layers))
            result.monotonic_violations += inc
            result.reappearances += back
            result.metrics.append({
                "step": step,
                "task_loss": parts["task"].item(),
                "repair_loss": parts["repair"].item(),
                "sparse_loss": parts["sparse"].item(),
                "r_bar": parts["r_bar"].item(),
                "tau": tau,
                "r_star": r_star,
                "lr": lr,
            })
            if step % 50 == 0:
                log.info("train step %d %s", step, result.metrics[-1])
        result.digest_after = model.backbone.digest()
    if metrics_path is not None:
        write_metrics(metrics_path, result.metrics)
    return result


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_COLUMNS})


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    predictions: np.ndarray
    accuracy: float
    masks: np.ndarray  # (n_layers, B, N) cumulative hard masks
    per_layer_retention: np.ndarray  # (n_layers,)
    avg_tokens: float
    monotonic_violations: int
    reappearances: int


def evaluate(model: RCPModel, batch: Batch, mode: str = "masked", chunk: int = 250) -> EvalResult:
    if mode not in ("masked", "gathered"):
        raise ValueError(f"unknown mode {mode!r}")
    n_layers = model.backbone.config.n_layers
    preds, masks = [], []
    step = 1 if mode == "gathered" else chunk
    for i in range(0, len(batch), step):
        part = batch.subset(np.arange(i, min(i + step, len(batch))))
        seen = {}

        def run(tok, part=part, seen=seen):
            logits, state, hooks = model.student(tok, part.vision, gathered=(mode == "gathered"))
            seen["hooks"] = hooks
            return answer_logits(logits, state)

        preds.append(greedy_decode(run, part.tokens, part.layout))
        masks.append(seen["hooks"].hard_per_layer(n_layers))
    preds = np.concatenate(preds)
    masks = np.concatenate(masks, axis=1)
    inc, back = mask_violations(masks)
    per_layer = masks.mean(axis=(1, 2))
    return EvalResult(
        predictions=preds,
        accuracy=exact_match(preds, batch.targets),
        masks=masks,
        per_layer_retention=per_layer,
        avg_tokens=float(per_layer.mean() * model.layout.n_vision),
        monotonic_violations=inc,
        reappearances=back,
    )


# ---------------------------------------------------------------------------
# end-to-end gradient check


def gradcheck_setup(seed: int = 0):
    """A tiny model, batch and loss closure for the finite-difference check.

    Adapter weights that start at zero are perturbed so every parameter sits
    on a live gradient path.
    """
    from .backbone import BackboneConfig
    from .data import TaskConfig
    from .model import PluginConfig

    task = TaskConfig(n_vision=6, k_informative=2)
    layout = task.layout()
    bcfg = BackboneConfig(n_layers=4, d_model=8, n_heads=2, d_ff=16, vocab_size=task.vocab_size,
                          vision_dim=task.vision_dim, max_len=16)
    rng = T.Rng(seed)
    backbone = Backbone(bcfg, seed=int(rng.stream("backbone-init").integers(2**63)))
    plugin = PluginConfig(prune_layers=(1, 2), repair_layers=(2, 3), n_queries=4, d_bottleneck=2, bias_init=0.5)
    model = RCPModel(backbone, layout, plugin, seed=seed)
    gen = rng.stream("gradcheck-perturb")
    for adapter in model.adapters.values():
        for name in ("gamma_w", "beta_w", "up_w", "up_b"):
            p = adapter.params[name]
            p.data = p.data + gen.normal(0.0, 0.3, size=p.shape)
    batch = generate_batch(rng.stream("gradcheck-data"), task, 2)
    _, teacher_state = model.teacher(batch.tokens, batch.vision)
    weights = LossWeights()

    def loss():
        logits, state, hooks = model.student(batch.tokens, batch.vision, training=True, tau=1.0, rng=rng, step=0)
        parts = step_losses(model, batch, teacher_state, logits, state, hooks, r_star=0.3)
        return total_loss(parts["task"], parts["repair"], parts["sparse"], weights)

    return model, loss


def gradcheck(seed: int = 0, h: float = 1e-5) -> float:
    """Worst relative error of the total-loss gradient over every trainable parameter (64-bit)."""
    with T.precision(np.float64):
        model, loss = gradcheck_setup(seed)
        return T.finite_diff_check(loss, model.trainable().values(), h=h)
