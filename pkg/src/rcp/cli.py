"""Command-line entry point: ``rcp <command> [options]``.

Commands: pretrain, train, eval, report, gradcheck, flops.

Run directories are resolved under ``$RCP_OUTPUT_ROOT`` (default: the
current directory) unless an absolute path is given. Exit status is 0 on
success, 1 on a validation error and 2 on a numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import harness as H
from .backbone import Backbone, BackboneConfig, ConfigError
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .config import RunConfig, dump_config, load_config, parse_config
from .efficiency import (
    FLOPS_FORMULA,
    KV_FORMULA,
    CostModel,
    flops_total,
    kv_cache_bytes,
    layer_drift,
    retention_report,
    seq_lengths,
)
from .tensor import NumericError

OUTPUT_ROOT_ENV = "RCP_OUTPUT_ROOT"
BACKBONE_FILE = "backbone.rcpt"
PLUGIN_FILE = "plugin.rcpt"
CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"
EVAL_FILE = "eval.json"
DRIFT_EXAMPLES = 200


class ValidationError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_dir(path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


def _config_from_args(args, **extra) -> RunConfig:
    overrides = dict(extra)
    for item in args.set or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config:
        return load_config(args.config, **overrides)
    return parse_config("", **overrides)


def _run_dir(args, cfg: RunConfig) -> Path:
    return resolve_dir(args.output or cfg.output_dir)


def _write_config(run_dir: Path, cfg: RunConfig) -> None:
    (run_dir / CONFIG_FILE).write_text(dump_config(cfg), encoding="utf-8")


def load_backbone(path) -> Backbone:
    arrays, meta = load_arrays(path)
    if "backbone" not in meta:
        raise ValidationError(f"{path}: no backbone configuration in metadata")
    return Backbone(BackboneConfig(**meta["backbone"]), params=arrays)


def save_backbone(path, backbone: Backbone, extra: dict | None = None) -> None:
    from dataclasses import asdict

    meta = {"backbone": asdict(backbone.config), "digest": backbone.digest()}
    meta.update(extra or {})
    save_arrays(path, backbone.numpy_params(), meta)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = _config_from_args(args)
    run_dir = _run_dir(args, cfg)
    target = run_dir / BACKBONE_FILE
    if target.exists() and not args.force:
        raise ValidationError(f"{target} exists; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    backbone, acc = H.pretrain(cfg)
    save_backbone(target, backbone, {"accuracy": acc})
    _write_config(run_dir, cfg)
    print(f"backbone {target} digest {backbone.digest()} accuracy {acc:.4f}")
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.variant:
        extra["variant"] = args.variant
    if args.target_retention is not None:
        extra["target_retention"] = args.target_retention
    cfg = _config_from_args(args, **extra)
    run_dir = _run_dir(args, cfg)
    source = Path(args.backbone) if args.backbone else run_dir / BACKBONE_FILE
    if not source.exists():
        raise ValidationError(f"backbone checkpoint {source} not found; run pretrain first")
    backbone = load_backbone(source)
    if backbone.config != cfg.backbone():
        raise ValidationError("backbone checkpoint dimensions differ from the configuration")
    run_dir.mkdir(parents=True, exist_ok=True)
    if source.resolve() != (run_dir / BACKBONE_FILE).resolve():
        shutil.copyfile(source, run_dir / BACKBONE_FILE)
    _write_config(run_dir, cfg)
    before = backbone.digest()
    result = H.train(cfg, backbone, metrics_path=run_dir / METRICS_FILE)
    if result.digest_before != result.digest_after or backbone.digest() != before:
        raise NumericError("backbone parameters changed during training")
    plugin = {k: v.data for k, v in result.model.trainable().items()}
    save_arrays(run_dir / PLUGIN_FILE, plugin, {"variant": cfg.variant})
    f = result.final
    print(f"trained {cfg.variant} steps {f['step'] + 1} r_bar {f['r_bar']:.4f} "
          f"task_loss {f['task_loss']:.4f} repair_loss {f['repair_loss']:.6f}")
    return 0


def _load_run(run_dir: Path, need=(CONFIG_FILE, BACKBONE_FILE, PLUGIN_FILE)):
    missing = [name for name in need if not (run_dir / name).exists()]
    if missing:
        raise ValidationError(f"run directory {run_dir} is missing: {', '.join(missing)}")
    cfg = load_config(run_dir / CONFIG_FILE)
    backbone = load_backbone(run_dir / BACKBONE_FILE)
    model = H.build_model(cfg, backbone)
    arrays, _ = load_arrays(run_dir / PLUGIN_FILE)
    model.load_trainable(arrays)
    return cfg, backbone, model


def cmd_eval(args) -> int:
    run_dir = resolve_dir(args.run)
    cfg, backbone, model = _load_run(run_dir)
    batch = H.eval_batch(cfg)
    res = H.evaluate(model, batch, args.mode)
    full = H.exact_match(H.backbone_predict(backbone, batch), batch.targets)
    out = {
        "mode": args.mode,
        "examples": len(batch),
        "accuracy": res.accuracy,
        "accuracy_full": full,
        "avg_tokens": res.avg_tokens,
        "per_layer_retention": res.per_layer_retention.tolist(),
        "monotonic_violations": res.monotonic_violations,
        "reappearances": res.reappearances,
    }
    (run_dir / EVAL_FILE).write_text(json.dumps(out, indent=2), encoding="utf-8")
    print(f"{args.mode} accuracy {res.accuracy:.4f} (full {full:.4f}) avg vision tokens {res.avg_tokens:.2f}")
    return 0


def _cost(cfg: RunConfig, retention, include_text: bool = True) -> CostModel:
    return CostModel(cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff,
                     seq_lengths(cfg.layout(), retention, include_text), bytes_per_element=8)


def cmd_report(args) -> int:
    run_dir = resolve_dir(args.run)
    need = (CONFIG_FILE, BACKBONE_FILE, PLUGIN_FILE, METRICS_FILE, EVAL_FILE)
    cfg, backbone, model = _load_run(run_dir, need)
    ev = json.loads((run_dir / EVAL_FILE).read_text(encoding="utf-8"))
    metrics = H.read_metrics(run_dir / METRICS_FILE)
    if not metrics:
        raise ValidationError(f"{run_dir / METRICS_FILE} has no rows")

    batch = H.eval_batch(cfg, DRIFT_EXAMPLES)
    _, teacher_state = model.teacher(batch.tokens, batch.vision)
    _, student_state, _ = model.student(batch.tokens, batch.vision)
    drift = layer_drift(teacher_state.trace, student_state.trace)
    with open(run_dir / "drift.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "w2sq"])
        w.writerows([(l, repr(v)) for l, v in drift])

    retention = ev["per_layer_retention"]
    rows = retention_report(retention, cfg.resolved_prune_layers(), cfg.target_retention)
    with open(run_dir / "retention.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "percent"])
        w.writerows([(r["layer"], f"{r['percent']:.2f}") for r in rows])

    dense = [1.0] * cfg.n_layers
    pruned_cost, dense_cost = _cost(cfg, retention), _cost(cfg, dense)
    vis_pruned, vis_dense = _cost(cfg, retention, False), _cost(cfg, dense, False)
    flops_ratio = flops_total(pruned_cost) / flops_total(dense_cost)
    cache_ratio = kv_cache_bytes(vis_pruned) / kv_cache_bytes(vis_dense)
    with open(run_dir / "efficiency.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {FLOPS_FORMULA}\n# {KV_FORMULA}\n")
        w = csv.writer(fh)
        w.writerow(["setting", "flops", "kv_bytes", "vision_kv_bytes", "latency"])
        for name, cost, vis in (("full", dense_cost, vis_dense), ("pruned", pruned_cost, vis_pruned)):
            w.writerow([name, repr(flops_total(cost)), repr(kv_cache_bytes(cost)), repr(kv_cache_bytes(vis)),
                        "not-modeled"])

    summary = {
        "accuracy_full": ev["accuracy_full"],
        "accuracy_pruned": ev["accuracy"],
        "avg_tokens": ev["avg_tokens"],
        "flops_ratio": flops_ratio,
        "cache_ratio": cache_ratio,
        "final_repair_loss": metrics[-1]["repair_loss"],
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_gradcheck(args) -> int:
    err = H.gradcheck(seed=args.seed, h=args.step)
    print(f"max relative error {err:.3e}")
    if not err <= args.tolerance:
        raise NumericError(f"gradient check failed: {err:.3e} > {args.tolerance:g}")
    return 0


def cmd_flops(args) -> int:
    cfg = _config_from_args(args)
    if args.retention is None:
        retention = [1.0] * cfg.n_layers
    else:
        retention = [float(v) for v in args.retention.split(",")]
        if len(retention) == 1:
            retention = retention * cfg.n_layers
        if len(retention) != cfg.n_layers:
            raise ValidationError(f"--retention needs 1 or {cfg.n_layers} values")
    cost, dense = _cost(cfg, retention), _cost(cfg, [1.0] * cfg.n_layers)
    vis, vis_dense = _cost(cfg, retention, False), _cost(cfg, [1.0] * cfg.n_layers, False)
    print(FLOPS_FORMULA)
    print(KV_FORMULA)
    print(f"flops {flops_total(cost):.6g} ratio {flops_total(cost) / flops_total(dense):.6f}")
    print(f"kv_bytes {kv_cache_bytes(cost):.6g} vision_kv_ratio {kv_cache_bytes(vis) / kv_cache_bytes(vis_dense):.6f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        p.add_argument("--output", help="run directory (default: output_dir from the config)")

    p = sub.add_parser("pretrain", help="train and freeze the toy backbone")
    with_config(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing checkpoint")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the pruning and repair plug-in")
    with_config(p)
    p.add_argument("--backbone", help="backbone checkpoint (default: <run dir>/backbone.rcpt)")
    p.add_argument("--variant", help="full, pruner-only, no-adapter, no-repair-loss, mean-only-repair, topk")
    p.add_argument("--target-retention", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("run")
    p.add_argument("--mode", choices=("masked", "gathered"), default="gathered")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="write drift, retention, efficiency and summary files")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of the total loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="analytic FLOPs and KV-cache size")
    with_config(p)
    p.add_argument("--retention", help="one value, or one per layer, comma separated")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValidationError, ConfigError, CheckpointError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
