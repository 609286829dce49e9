import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spikeir import tensor as tn
from spikeir.errors import ConfigError, DimensionError
from spikeir.neuron import (LifParams, LifState, SurrogateForward, encode_direct, lif_sequence, lif_step,
                            membrane_histogram, surrogate_grad, surrogate_primitive, voltage_density,
                            write_histogram_csv)
from spikeir.tensor import Tape, TensorRec

from helpers import rel_err

P = LifParams()


def t(a):
    return TensorRec(np.asarray(a, dtype=np.float32).reshape(1, 1, 1, -1))


def test_params_validation():
    for bad in (dict(beta=0), dict(beta=1.5), dict(v_th=0), dict(reset="x"), dict(surrogate_alpha=0)):
        with pytest.raises(ConfigError):
            LifParams(**bad)


def test_encode_direct():
    x = TensorRec(np.random.default_rng(0).random((1, 2, 3, 3)).astype(np.float32))
    enc = encode_direct(x, 4)
    assert enc.shape == (4, 2, 3, 3)
    assert all(np.array_equal(enc.data[i], x.data[0]) for i in range(4))
    assert np.array_equal(encode_direct(x, 1).data, x.data)
    assert np.allclose(tn.time_mean(enc, 4).data, x.data)
    with pytest.raises(ConfigError):
        encode_direct(x, 0)


def test_lif_step_subthreshold():
    s, st_ = lif_step(t([0.4]), LifState.zeros_like(t([0.0])), P)
    assert s.data.item() == 0.0
    assert st_.v.data.item() == pytest.approx(0.4)


def test_lif_step_soft_reset():
    s, st_ = lif_step(t([1.2]), LifState.zeros_like(t([0.0])), P)
    assert s.data.item() == 1.0
    assert st_.v.data.item() == pytest.approx(0.2, abs=1e-6)


def test_lif_step_hard_reset():
    s, st_ = lif_step(t([1.2]), LifState.zeros_like(t([0.0])), LifParams(reset="hard"))
    assert s.data.item() == 1.0 and st_.v.data.item() == 0.0


def test_lif_step_shape_mismatch():
    with pytest.raises(DimensionError):
        lif_step(t([1.0, 2.0]), LifState.zeros_like(t([0.0])), P)


def test_zero_current_decays_and_never_fires():
    state = LifState(t([0.9]))
    for k in range(6):
        s, state = lif_step(t([0.0]), state, P)
        assert s.data.item() == 0.0
        assert state.v.data.item() == pytest.approx(0.9 * 0.5 ** (k + 1))


def test_surrogate_values():
    assert surrogate_grad(1.0, P) == pytest.approx(1.0)
    assert surrogate_grad(1e6, P) < 1e-9
    for d in (0.125, 0.75, 3.0):
        assert surrogate_grad(1 + d, P) == surrogate_grad(1 - d, P)
        assert 0 < surrogate_grad(1 + d, P) < surrogate_grad(1.0, P)


def test_surrogate_primitive_derivative():
    v = np.linspace(-2, 3, 41)
    h = 1e-5
    fd = (surrogate_primitive(v + h, P) - surrogate_primitive(v - h, P)) / (2 * h)
    assert np.allclose(fd, surrogate_grad(v, P), rtol=1e-6)


def test_sequence_zero_current():
    out = lif_sequence(TensorRec(np.zeros((4, 2, 3, 3), np.float32)), P)
    assert not out.spikes.data.any() and out.firing_rate == 0.0


def test_sequence_constant_twice_threshold_fires_every_step():
    out = lif_sequence(TensorRec(np.full((4, 1, 2, 2), 2.0, np.float32)), P)
    assert np.all(out.spikes.data == 1.0) and out.firing_rate == 1.0


def test_sequence_matches_step_loop_and_trace():
    rng = np.random.default_rng(1)
    cur = rng.normal(0.6, 0.8, (5, 2, 3, 3)).astype(np.float32)
    out = lif_sequence(TensorRec(cur), P)
    state = LifState.zeros_like(TensorRec(cur[:1]))
    for k in range(5):
        vp = P.beta * state.v.data + cur[k:k + 1]
        assert np.allclose(out.v_trace.data[k:k + 1], vp)
        s, state = lif_step(TensorRec(cur[k:k + 1]), state, P)
        assert np.array_equal(out.spikes.data[k:k + 1], s.data)
    assert out.firing_rate == pytest.approx(out.spikes.data.mean())


def test_batched_sequence_equals_per_sample():
    rng = np.random.default_rng(2)
    T, B = 4, 3
    cur = rng.normal(0.5, 1.0, (T * B, 2, 2, 2)).astype(np.float32)
    out = lif_sequence(TensorRec(cur), P, steps=T)
    for b in range(B):
        single = lif_sequence(TensorRec(cur[b::B]), P)
        assert np.array_equal(out.spikes.data[b::B], single.spikes.data)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (4, 1, 2, 3), elements=st.floats(-5, 5, width=32)),
       st.sampled_from(["soft", "hard"]))
def test_spikes_binary_and_rate_in_unit_interval(cur, reset):
    out = lif_sequence(TensorRec(cur), LifParams(reset=reset))
    assert set(np.unique(out.spikes.data)) <= {0.0, 1.0}
    assert 0.0 <= out.firing_rate <= 1.0
    assert out.firing_rate == pytest.approx(float(out.spikes.data.mean()))


def _smooth_grad_check(reset, seed):
    rng = np.random.default_rng(seed)
    T = 4
    cur = rng.normal(0.8, 0.6, (T, 2, 2, 2))
    w = rng.standard_normal(cur.shape)
    p = LifParams(reset=reset)
    smooth = SurrogateForward()

    def value(c):
        with smooth:
            return float(np.sum(lif_sequence(TensorRec(c), p).spikes.data * w))

    value(cur)  # record reset decisions
    x = TensorRec(cur.copy(), requires_grad=True)
    with smooth, Tape() as tape:
        s = lif_sequence(x, p).spikes
        loss = tn.scale(tn.reduce_mean(tn.mul(s, TensorRec(w))), float(w.size))
    tn.backward(tape, loss)
    h = 1e-3
    num = np.zeros_like(cur)
    for idx in np.ndindex(cur.shape):
        a, b = cur.copy(), cur.copy()
        a[idx] += h
        b[idx] -= h
        num[idx] = (value(a) - value(b)) / (2 * h)
    return x.grad, num


@pytest.mark.parametrize("reset", ["soft", "hard"])
@pytest.mark.parametrize("seed", range(5))
def test_surrogate_backward_matches_smoothed_forward(reset, seed):
    analytic, numeric = _smooth_grad_check(reset, seed)
    assert rel_err(analytic, numeric) < 1e-2


def test_voltage_density_and_histogram(tmp_path):
    v = TensorRec(np.array([0.0, 0.005, 0.5, -3.0, 1.0, 0.0, 2.5, -0.02],
                           dtype=np.float32).reshape(2, 1, 1, 4))
    assert voltage_density(v, P) == pytest.approx(5 / 8)
    edges, counts = membrane_histogram(v, 2, P)
    assert counts.shape == (2, 32) and counts.sum() == 8
    assert edges[0] == -2.0 and edges[-1] == 2.0
    assert counts[0, 0] == 1 and counts[1, -1] == 1
    path = tmp_path / "h.csv"
    write_histogram_csv(path, {"enc1.lif": v}, 2, P)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "layer", "bin_lo", "bin_hi", "count"]
    assert len(rows) == 1 + 2 * 32
    assert sum(int(r[4]) for r in rows[1:]) == 8
