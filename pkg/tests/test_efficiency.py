import numpy as np
import pytest

from rcp.backbone import LayerTrace
from rcp.efficiency import (
    CostModel,
    RetentionOrderError,
    TraceMismatchError,
    flops_total,
    kv_cache_bytes,
    layer_drift,
    retention_report,
    seq_lengths,
)
from rcp.layout import SequenceLayout
from rcp.tensor import Tensor


def _cm(s, d=32, d_ff=64, n_layers=None):
    s = tuple(s)
    return CostModel(n_layers or len(s), d, 4, d_ff, s)


def test_flops_empty_sequence():
    assert flops_total(_cm([0] * 8)) == 0


def test_flops_homogeneity():
    gen = np.random.default_rng(0)
    s = gen.integers(2, 80, size=8) * 2
    d, f = 32, 64
    linear = sum(8 * x * d * d + 4 * x * d * f for x in s)
    quad = sum(4 * x * x * d for x in s)
    assert flops_total(_cm(s)) == linear + quad
    assert flops_total(_cm(s // 2)) == linear / 2 + quad / 4


def test_flops_spreadsheet_oracle():
    # one layer: QKVO 8*76*32*32 = 622592, scores 4*76*76*32 = 739328, MLP 4*76*32*64 = 622592
    per_layer = 622592 + 739328 + 622592
    assert flops_total(_cm([76] * 8)) == 8 * per_layer == 15_876_096


def test_flops_monotone_in_retention():
    layout = SequenceLayout(1, 36, 2, 2)
    values = [flops_total(_cm(seq_lengths(layout, [r] * 8))) for r in (0.11, 0.22, 0.33, 1.0)]
    assert all(a < b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("kept, ratio", [(192, 1 / 3), (64, 1 / 9)])
def test_storage_ratios_of_the_visual_cache(kept, ratio):
    layout = SequenceLayout(0, 576, 1, 1)
    full = kv_cache_bytes(_cm(seq_lengths(layout, [1.0] * 32, include_text=False)))
    pruned = kv_cache_bytes(_cm(seq_lengths(layout, [kept / 576] * 32, include_text=False)))
    assert pruned / full == pytest.approx(ratio, rel=1e-12)
    table = {192: 100.8, 64: 33.6}[kept]
    assert pruned / full == pytest.approx(table / 302.4, rel=1e-12)


def test_kv_zero_and_linearity():
    assert kv_cache_bytes(_cm([0] * 4)) == 0
    s = [76, 50, 20, 20]
    assert kv_cache_bytes(_cm(s, d=64)) == 2 * kv_cache_bytes(_cm(s, d=32))
    assert kv_cache_bytes(_cm(s)) == sum(x * 2 * 32 * 8 for x in s)


def test_seq_lengths_count_text_and_kept_vision():
    layout = SequenceLayout(1, 36, 2, 2)
    assert seq_lengths(layout, [1.0, 0.5, 0.0]) == (41.0, 23.0, 5.0)
    assert seq_lengths(layout, [0.5], include_text=False) == (18.0,)


def test_cost_model_layer_count():
    with pytest.raises(ValueError):
        CostModel(8, 32, 4, 64, (10,) * 7)


def _trace(hidden, layout):
    t = LayerTrace()
    for h in hidden:
        t.hidden.append(Tensor(h))
        t.layouts.append(layout)
    return t


def layout_drift_pairs(a, b, layout):
    return layer_drift(_trace(a, layout), _trace(b, layout))


def test_drift_of_identical_traces_is_zero():
    layout = SequenceLayout(1, 3, 2, 2)
    gen = np.random.default_rng(1)
    hidden = [gen.normal(size=(2, layout.length, 4)) for _ in range(3)]
    assert [v for _, v in layout_drift_pairs(hidden, hidden, layout)] == [0.0, 0.0, 0.0]


def test_drift_properties():
    layout = SequenceLayout(1, 3, 2, 3)
    gen = np.random.default_rng(2)
    teacher = [gen.normal(size=(2, layout.length, 4)) for _ in range(3)]
    student = [h.copy() for h in teacher]
    student[2] = student[2] + gen.normal(size=student[2].shape)
    drift = layout_drift_pairs(teacher, student, layout)
    assert [l for l, _ in drift] == [0, 1, 2]
    assert drift[0][1] == 0 and drift[1][1] == 0 and drift[2][1] > 0
    a = layout.answer_span()
    shuffled = [h.copy() for h in student]
    shuffled[2][:, a.start : a.stop] = shuffled[2][:, a.start : a.stop][:, ::-1]
    assert layout_drift_pairs(teacher, shuffled, layout)[2][1] == pytest.approx(drift[2][1], abs=1e-14)


def test_drift_uses_each_trace_layout():
    # a gathered student is shorter, but its answer rows line up with the teacher's
    full, short = SequenceLayout(1, 4, 2, 2), SequenceLayout(1, 1, 2, 2)
    gen = np.random.default_rng(3)
    h = gen.normal(size=(1, full.length, 4))
    g = np.concatenate([h[:, :2], h[:, 5:]], axis=1)
    drift = layer_drift(_trace([h], full), _trace([g], short))
    assert drift[0][1] == 0.0


def test_drift_trace_mismatch():
    layout = SequenceLayout(1, 2, 1, 1)
    h = np.zeros((1, layout.length, 2))
    with pytest.raises(TraceMismatchError):
        layer_drift(_trace([h, h], layout), _trace([h], layout))


def test_retention_report_single_layer():
    rows = retention_report([1.0, 0.5, 0.5], [1])
    assert [(r["layer"], r["percent"]) for r in rows] == [(1, 50.0)]


def test_retention_report_three_stages_are_ordered():
    r = [1.0, 0.6021, 0.6021, 0.0747, 0.0747, 0.0747, 0.0156, 0.0156]
    rows = retention_report(r, [1, 3, 6], 0.33)
    pct = [row["percent"] for row in rows]
    assert pct[0] > pct[1] > pct[2]
    assert rows[0]["target"] == 0.33


def test_retention_report_matches_recount():
    gen = np.random.default_rng(4)
    masks = np.ones((8, 50, 36))
    for l in (1, 3, 6):
        masks[l:] *= gen.random((50, 36)) > 0.4
    per_layer = masks.mean(axis=(1, 2))
    rows = retention_report(per_layer, [1, 3, 6])
    for row in rows:
        recount = sum(masks[row["layer"]].ravel()) / masks[row["layer"]].size
        assert row["percent"] == pytest.approx(100 * recount, abs=1e-12)


def test_retention_report_rejects_growth():
    with pytest.raises(RetentionOrderError):
        retention_report([1.0, 0.4, 0.5], [1, 2])
