import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeir.energy import (BlockOpCount, EnergyConstants, block_energy, compare, count_ops,
                            measure_firing_rates, profile_ann, profile_snn)
from spikeir.errors import ContractError
from spikeir.models import (Layer, ModelGraph, StudentConfig, TeacherConfig, build_student, build_teacher,
                            forward_student)
from spikeir.neuron import LifParams
from spikeir.tensor import TensorRec

K = EnergyConstants()


def samples(n=2, h=4, w=4, seed=0):
    return np.random.default_rng(seed).random((n, 1, h, w)).astype(np.float32)


def test_constants():
    assert (K.e_mac, K.e_ac) == (4.6, 0.9)


def test_count_conv_analog_and_spike():
    lay = Layer("c", "conv", 1, 8, 0, kernel=3, params=("c.weight",))
    a = count_ops(lay, 16, 16, "analog")
    s = count_ops(lay, 16, 16, "spike")
    assert (a.op_mac, a.op_ac) == (18432, 0)
    assert (s.op_ac, s.op_mac) == (18432, 0)


def test_count_identity_1x1_and_bias():
    lay = Layer("c", "conv", 1, 1, 0, kernel=1, params=("c.weight",))
    assert count_ops(lay, 1, 1, "analog").op_mac == 1
    biased = Layer("c", "conv", 1, 8, 0, kernel=3, params=("c.weight", "c.bias"))
    c = count_ops(biased, 16, 16, "analog")
    assert (c.op_mac, c.op_ac) == (18432, 8 * 256)
    assert count_ops(biased, 16, 16, "analog", all_mac=True).op_mac == 18432 + 2048


def test_count_strided_conv_uses_output_level():
    lay = Layer("d", "conv", 8, 16, 1, kernel=3, stride=2, params=("d.weight",))
    assert count_ops(lay, 32, 32, "spike").op_ac == 16 * 16 * 16 * 8 * 9


def test_count_other_kinds():
    assert count_ops(Layer("n", "norm", 4, 4, 1), 8, 8).op_mac == 4 * 16
    assert count_ops(Layer("u", "upsample", 4, 4, 0), 8, 8).op_mac == 4 * 4 * 64
    assert count_ops(Layer("a", "attention", 4, 4, 0), 8, 8).op_mac == 6 * 256 + 10
    assert count_ops(Layer("l", "lif", 4, 4, 0), 8, 8) == BlockOpCount("l", "lif", 0, 0)
    with pytest.raises(ContractError):
        count_ops(Layer("x", "pool", 4, 4, 0), 8, 8)


def test_block_energy_examples():
    c = BlockOpCount("b", "conv", op_ac=1000, op_mac=0)
    assert block_energy(c, 0.5, 4) == pytest.approx(1800.0, rel=1e-15)
    m = BlockOpCount("b", "conv", op_ac=1000, op_mac=7)
    assert block_energy(m, 0.0, 4) == 4 * 4.6 * 7
    assert block_energy(BlockOpCount("z", "conv"), 0.3, 4) == 0.0
    for fr in (-0.1, 1.5):
        with pytest.raises(ContractError):
            block_energy(c, fr, 4)


def test_block_energy_randomized_hand_evaluation():
    rng = np.random.default_rng(42)
    for _ in range(10):
        ac, mac = (int(v) for v in rng.integers(0, 10**7, 2))
        fr = float(rng.random())
        T = int(rng.integers(1, 9))
        expect = T * (fr * 0.9 * ac + 4.6 * mac)
        assert block_energy(BlockOpCount("r", "conv", ac, mac), fr, T) == expect


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.floats(0, 0.5), st.integers(1, 8))
def test_block_energy_linear(ac, mac, fr, T):
    c = BlockOpCount("b", "conv", ac, mac)
    e = block_energy(c, fr, T)
    assert block_energy(c, fr, 2 * T) == pytest.approx(2 * e, rel=1e-12, abs=1e-9)
    assert block_energy(BlockOpCount("b", "conv", 2 * ac, 2 * mac), fr, T) == pytest.approx(2 * e, rel=1e-12, abs=1e-9)
    only_ac = block_energy(BlockOpCount("b", "conv", ac, 0), fr, T)
    assert block_energy(BlockOpCount("b", "conv", ac, 0), 2 * fr, T) == pytest.approx(2 * only_ac, rel=1e-12, abs=1e-9)
    assert e == pytest.approx(only_ac + block_energy(BlockOpCount("b", "conv", 0, mac), fr, T), rel=1e-12)


MICRO = StudentConfig(levels=1, channels=(2,), blocks_per_level=0, T=4, attention=False, norm=False,
                      zero_tail=False)


def test_micro_model_hand_trace():
    g = build_student(MICRO, seed=1)
    assert [lay.kind for lay in g.layers] == ["conv", "lif", "conv"]
    x = samples(3)
    fr = forward_student(g, TensorRec(x)).firing_rates["head.lif"]
    rep = profile_snn(g, x)
    T = 4
    head = T * (1.0 * 0.9 * (2 * 16) + 4.6 * (2 * 16 * 1 * 9))
    tail = T * (fr * 0.9 * (1 * 16 * 2 * 9 + 16))
    out = T * 4.6 * 16
    assert [r.block for r in rep.rows] == ["head.conv", "tail.conv", "output"]
    assert rep.block("head.conv").energy_pj == head
    assert rep.block("tail.conv").energy_pj == pytest.approx(tail, rel=1e-15)
    assert rep.total_pj == pytest.approx(head + tail + out, rel=1e-15)


def test_micro_ann_twin_closed_form():
    t = build_teacher(TeacherConfig(levels=1, channels=(2,), blocks_per_level=0))
    rep = profile_ann(t, samples(1))
    macs = (2 * 16 * 9 + 32) + (16 * 2 * 9 + 16) + 16
    assert rep.total_pj == pytest.approx(4.6 * macs, rel=1e-15)
    assert rep.T == 1


def test_zero_layer_graph():
    assert profile_ann(ModelGraph(kind="teacher"), samples(1)).total_pj == 0.0


def test_silent_network_spends_only_dense_ops():
    cfg = StudentConfig(lif=LifParams(v_th=1e6))
    g = build_student(cfg)
    rep = profile_snn(g, samples(2, 16, 16))
    spike_rows = [r for r in rep.rows if r.kind == "conv/spike"]
    assert spike_rows and all(r.fr == 0.0 and r.energy_pj == 0.0 for r in spike_rows)
    assert rep.block("head.conv").energy_pj > 0


def test_totals_additive_and_reproducible():
    g = build_student(seed=2)
    x = samples(2, 16, 16)
    a, b = profile_snn(g, x), profile_snn(g, x)
    assert a.total_pj == sum(r.energy_pj for r in a.rows)
    assert a.to_csv() == b.to_csv()


def test_reported_rates_equal_forward_rates():
    g = build_student(seed=3)
    x = samples(4, 16, 16)
    rates = forward_student(g, TensorRec(x)).firing_rates
    assert measure_firing_rates(g, x) == pytest.approx(rates, rel=1e-12)
    rep = profile_snn(g, x)
    assert rep.block("enc1.block2.conv").fr == pytest.approx(rates["enc1.block1.lif"], rel=1e-12)
    assert rep.block("enc1.block1.conv").fr == pytest.approx(rates["head.lif"], rel=1e-12)


def test_skip_input_split_into_two_rows():
    g = build_student(seed=0)
    rep = profile_snn(g, samples(1, 16, 16))
    rows = [r for r in rep.rows if r.block.startswith("dec1.block1.conv<")]
    assert {r.block for r in rows} == {"dec1.block1.conv<dec1.up.lif", "dec1.block1.conv<enc1.block2.lif"}
    assert rows[0].op_ac - rows[1].op_ac == 8 * 16 * 16


def test_report_formats():
    g = build_student(seed=0)
    x = samples(2, 16, 16)
    snn = profile_snn(g, x)
    ratio = compare(snn, profile_ann(build_teacher(), x))
    text = snn.to_text()
    assert "E_MAC = 4.6 pJ" in text and "E_AC = 0.9 pJ" in text
    assert snn.to_csv().splitlines()[0] == "block,kind,op_ac,op_mac,fr,energy_pj"
    summary = json.loads(snn.to_json())
    assert set(summary) == {"total_pj", "total_uj", "T", "ratio_vs_ann"}
    assert summary["total_uj"] == pytest.approx(summary["total_pj"] * 1e-6)
    assert summary["ratio_vs_ann"] == ratio
