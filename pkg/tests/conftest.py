import numpy as np
import pytest

from rcp.backbone import Backbone, BackboneConfig
from rcp.data import TaskConfig, generate_batch
from rcp.model import PluginConfig, RCPModel


@pytest.fixture
def tiny_task():
    return TaskConfig(n_vision=8, k_informative=2)


@pytest.fixture
def tiny_backbone(tiny_task):
    cfg = BackboneConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32, vocab_size=tiny_task.vocab_size,
                         vision_dim=tiny_task.vision_dim, max_len=32)
    return Backbone(cfg, seed=5)


@pytest.fixture
def tiny_batch(tiny_task):
    return generate_batch(np.random.default_rng(2), tiny_task, 6)


def make_model(backbone, task, seed=0, **kw):
    opts = dict(prune_layers=(1, 2), repair_layers=(2, 3), n_queries=4, d_bottleneck=4)
    opts.update(kw)
    return RCPModel(backbone, task.layout(), PluginConfig(**opts), seed=seed)


@pytest.fixture
def model_factory():
    return make_model


@pytest.fixture(scope="session")
def default_backbone(request):
    """The default-config backbone, pretrained once and cached between sessions."""
    import hashlib

    from rcp import harness
    from rcp.cli import load_backbone, save_backbone
    from rcp.config import RunConfig, dump_config

    cfg = RunConfig()
    key = hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]
    path = request.config.cache.mkdir("rcp") / f"backbone-{key}.rcpt"
    if path.exists():
        return load_backbone(path)
    backbone, acc = harness.pretrain(cfg)
    save_backbone(path, backbone, {"accuracy": acc})
    return backbone


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; shown in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
