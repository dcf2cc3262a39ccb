"""Acceptance suite.

Each test checks one numbered criterion and records a PASS/FAIL line that
is printed in the terminal summary. Training runs are shared between
criteria through a session cache; all of them use the default config with
float32 training on the default pretrained backbone.
"""

import time

import numpy as np
import pytest

from rcp import harness as H
from rcp.config import RunConfig
from rcp.efficiency import CostModel, flops_total, kv_cache_bytes, layer_drift, seq_lengths
from rcp.layout import build_gate
from rcp.objectives import VARIANCE_SHIFT, feature_moments, repair_loss, sparsity_loss
from rcp.pruner import intrinsic_score
from rcp.repair import RepairAdapter, RepairContext, pruned_mean
from rcp.tensor import Tensor

SEEDS3 = (1, 2, 3)
SEEDS5 = (1, 2, 3, 4, 5)
DRIFT_EXAMPLES = 200


class Runs:
    """Lazily trained runs keyed by (variant, target, seed)."""

    def __init__(self, backbone):
        self.backbone = backbone
        self.cache = {}

    def get(self, variant, target, seed):
        key = (variant, target, seed)
        if key not in self.cache:
            cfg = RunConfig(precision="float32", variant=variant, target_retention=target, seed=seed)
            t0 = time.perf_counter()
            result = H.train(cfg, self.backbone)
            elapsed = time.perf_counter() - t0
            # evaluate in 64-bit, as the CLI does after reloading the plug-in checkpoint
            model = H.build_model(cfg.replace(precision="float64"), self.backbone)
            model.load_trainable({k: v.data for k, v in result.model.trainable().items()})
            ev = H.evaluate(model, H.eval_batch(cfg))
            batch = H.eval_batch(cfg, DRIFT_EXAMPLES)
            _, teacher = model.teacher(batch.tokens, batch.vision)
            _, student, _ = model.student(batch.tokens, batch.vision)
            drift = [v for _, v in layer_drift(teacher.trace, student.trace)]
            self.cache[key] = dict(cfg=cfg, result=result, model=model, seconds=elapsed, eval=ev, drift=drift)
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(default_backbone):
    return Runs(default_backbone)


def test_criterion_01_gradient_integrity(verdict):
    t0 = time.perf_counter()
    err = H.gradcheck(seed=0)
    secs = time.perf_counter() - t0
    ok = err <= 1e-4 and secs <= 120
    verdict(1, ok, f"max relative error {err:.2e} (<= 1e-4), {secs:.1f}s (<= 120s)")
    assert ok


def test_criterion_02_identity_at_init(verdict):
    cfg = RunConfig()
    layout = cfg.layout()
    gate = build_gate(layout)
    gen = np.random.default_rng(2)
    d, N = cfg.d_model, cfg.n_vision
    identical = 0
    for trial in range(100):
        adapter = RepairAdapter(d, np.random.default_rng(trial), cfg.d_bottleneck, cfg.alpha_init)
        x = gen.normal(size=(2, layout.length, d))
        keep = (gen.random((2, N)) > 0.5).astype(float)
        pooled, has = pruned_mean(Tensor(gen.normal(size=(2, N, d))), Tensor(1 - keep))
        ctx = RepairContext(1, Tensor(keep), pooled, has)
        out = adapter(Tensor(x), [ctx], gen.normal(size=(N, d)), gate)
        identical += out.data.tobytes() == x.tobytes()
    ok = identical == 100
    verdict(2, ok, f"{identical}/100 random inputs bitwise unchanged by fresh adapters")
    assert ok


def test_criterion_05_sparsity_convergence(runs, verdict):
    rows, ok = [], True
    for target in (0.33, 0.22, 0.11):
        for seed in SEEDS3:
            run = runs.get("full", target, seed)
            r_train = run["result"].final["r_bar"]
            r_eval = float(run["eval"].per_layer_retention.mean())
            good = abs(r_train - target) <= 0.05 and run["seconds"] <= 600
            ok &= good
            rows.append(f"r*={target} seed {seed}: train {r_train:.3f} eval {r_eval:.3f} {run['seconds']:.0f}s")
    verdict(5, ok, "final r_bar within 0.05 of target, <= 600s each; " + "; ".join(rows))
    assert ok


def test_criterion_03_cumulative_monotonicity(runs, verdict):
    inc = back = 0
    checked = 0
    for target in (0.33, 0.22, 0.11):
        for seed in SEEDS3:
            run = runs.get("full", target, seed)
            ev = run["eval"]
            inc += run["result"].monotonic_violations + ev.monotonic_violations
            back += run["result"].reappearances + ev.reappearances
            inc += int((np.diff(ev.per_layer_retention) > 0).sum())
            checked += 1
    ok = inc == 0 and back == 0
    verdict(3, ok, f"{checked} training runs + 1000 eval examples each: {inc} retention increases, "
                   f"{back} reappearing tokens")
    assert ok


def test_criterion_04_mask_gather_parity(runs, verdict):
    run = runs.get("full", 0.33, 1)
    model = run["model"]
    cfg = run["cfg"]
    batch = H.eval_batch(cfg, 200)
    gen = np.random.default_rng(4)
    worst = 0.0
    for i in range(200):
        tok, vis = batch.tokens[i : i + 1], batch.vision[i : i + 1]
        masks = {l: (gen.random((1, cfg.n_vision)) > gen.uniform(0.2, 0.8)).astype(float)
                 for l in model.prune_layers}
        _, masked, _ = model.student(tok, vis, forced_masks=masks)
        _, gathered, _ = model.student(tok, vis, gathered=True, forced_masks=masks)
        for l in range(cfg.n_layers):
            rows = gathered.trace.positions[l]
            diff = np.abs(masked.trace.hidden[l].data[0, rows] - gathered.trace.hidden[l].data[0]).max()
            worst = max(worst, float(diff))
    full = H.eval_batch(cfg)
    gathered_eval = H.evaluate(model, full, "gathered")
    same = int((gathered_eval.predictions == run["eval"].predictions).all(axis=1).sum())
    ok = worst <= 1e-9 and same == len(full)
    verdict(4, ok, f"max hidden-state difference {worst:.2e} over 200 pairs (<= 1e-9); "
                   f"identical greedy predictions on {same}/{len(full)} eval examples")
    assert ok


def test_criterion_06_repair_loss_full_vs_pruner_only(runs, verdict):
    wins, rows = 0, []
    for seed in SEEDS5:
        full = runs.get("full", 0.22, seed)["result"].final["repair_loss"]
        only = runs.get("pruner-only", 0.22, seed)["result"].final["repair_loss"]
        wins += full < only
        rows.append(f"seed {seed}: {full:.4f} vs {only:.4f}")
    ok = wins >= 4
    verdict(6, ok, f"full < pruner-only final repair loss in {wins}/5 seeds at r*=0.22; " + "; ".join(rows))
    assert ok


def test_criterion_07_drift_grows_with_depth(runs, verdict):
    wins, exact, rows = 0, 0, []
    for seed in SEEDS5:
        run = runs.get("pruner-only", 0.22, seed)
        first = run["cfg"].resolved_prune_layers()[0]
        drift = run["drift"]
        wins += drift[-1] > drift[first]
        exact += all(v == 0.0 for v in drift[:first])
        rows.append(f"seed {seed}: layer {first} {drift[first]:.4f} -> final {drift[-1]:.4f}")
    ok = wins >= 4 and exact == 5 and first > 0
    verdict(7, ok, f"final-layer drift > first post-pruning drift in {wins}/5 seeds; pre-pruning drift exactly 0 "
                   f"in {exact}/5; " + "; ".join(rows))
    assert ok


def test_criterion_08_ablation_ordering(runs, verdict):
    acc = {v: [] for v in ("full", "no-adapter", "no-repair-loss", "topk")}
    for seed in SEEDS5:
        for v in acc:
            acc[v].append(runs.get(v, 0.11, seed)["eval"].accuracy)
    a = {k: np.array(v) for k, v in acc.items()}
    counts = {
        "full >= no-adapter": int((a["full"] >= a["no-adapter"]).sum()),
        "no-adapter >= no-repair-loss": int((a["no-adapter"] >= a["no-repair-loss"]).sum()),
        "full > topk": int((a["full"] > a["topk"]).sum()),
    }
    ok = all(c >= 4 for c in counts.values())
    table = "; ".join(f"{k} {'/'.join(f'{x:.3f}' for x in v)}" for k, v in acc.items())
    verdict(8, ok, ", ".join(f"{k} in {c}/5" for k, c in counts.items()) + f"; accuracy per seed: {table}")
    assert ok


def test_criterion_09_storage_and_flops(verdict):
    cfg = RunConfig()
    layout = cfg.layout()

    def cost(r, include_text=True):
        return CostModel(cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff,
                         seq_lengths(layout, [r] * cfg.n_layers, include_text))

    full = kv_cache_bytes(cost(1.0, False))
    third = kv_cache_bytes(cost(12 / 36, False)) / full
    ninth = kv_cache_bytes(cost(4 / 36, False)) / full
    flops = [flops_total(cost(r)) for r in (0.11, 0.22, 0.33, 1.0)]
    ok = abs(third - 1 / 3) <= 1e-12 and abs(ninth - 1 / 9) <= 1e-12 and all(np.diff(flops) > 0)
    verdict(9, ok, f"storage ratios {third:.12f} (1/3) and {ninth:.12f} (1/9); flops at 0.11/0.22/0.33/1.0 "
                   + " < ".join(f"{f:.4g}" for f in flops))
    assert ok


def test_criterion_11_loss_oracles(verdict):
    errs = []
    H2 = Tensor([[0.0, 0.0], [2.0, 2.0]])
    mu, v = feature_moments(Tensor([[1.0, 1.0], [1.0, 1.0]]))
    errs += [np.abs(mu.data - 1).max(), np.abs(v.data).max()]
    mu, v = feature_moments(H2)
    errs += [np.abs(mu.data - 1).max(), np.abs(v.data - 1).max()]
    errs.append(np.abs(feature_moments(Tensor([[0.3, -1.0]]))[1].data).max())
    X = np.random.default_rng(11).normal(size=(6, 3))
    errs.append(abs(repair_loss(Tensor(X), X).item()))
    s = np.sqrt(1 + VARIANCE_SHIFT) - np.sqrt(VARIANCE_SHIFT)
    errs.append(abs(repair_loss(H2, np.ones((2, 2))).item() - (0.0 + s * s)))
    errs.append(abs(sparsity_loss(0.3, 0.3).item()))
    errs.append(abs(sparsity_loss(0.4, 0.3).item() - 0.1))
    errs.append(np.abs(intrinsic_score([0.5, 0.5], [1, 1])).max())
    errs.append(np.abs(intrinsic_score([0.8, 0.2], [1, 1]) - [np.log(2), -np.log(2)]).max())
    worst = float(max(errs))
    ok = worst <= 1e-10
    verdict(11, ok, f"{len(errs)} tabulated oracle checks, worst error {worst:.1e} (<= 1e-10)")
    assert ok


def test_criterion_10_frozen_backbone(runs, default_backbone, verdict):
    # runs last in this module, so it sees every run trained above
    reference = default_backbone.digest()
    runs.get("full", 0.33, 1)
    pairs = [(r["result"].digest_before, r["result"].digest_after) for r in runs.cache.values()]
    changed = sum(a != b for a, b in pairs)
    ok = changed == 0 and default_backbone.digest() == reference
    verdict(10, ok, f"{len(pairs)} training runs, {changed} with a changed backbone digest; "
                    f"source backbone digest {reference[:12]} unchanged")
    assert ok
