import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiqat import tensor as T
from tiqat.distill import distill_loss, loss_output, loss_pred, loss_trm
from tiqat.errors import ShapeMismatch
from tiqat.model import LayerTrace, ModelConfig, forward, init_model

CFG = ModelConfig(vocab=7, num_classes=3, L=2, d=8, H=2, d_ff=12, n=6)


def trace(seed):
    x = np.random.default_rng(seed).integers(0, 7, (3, 6))
    return forward(init_model(CFG, seed), x)[1]


def toy(xs, scores, aos, logits=(0.0, 0.0)):
    t = lambda a: T.Tensor(np.asarray(a, np.float64))  # noqa: E731
    return LayerTrace(x=[t(v) for v in xs], scores=[t(v) for v in scores],
                      ao=[t(v) for v in aos], logits=t([logits]))


def test_identical_traces_zero():
    tr = trace(0)
    lb = distill_loss(tr, tr, output_loss_active=True)
    assert lb.l_trm == 0 and lb.l_output == 0
    assert all(v == 0 for v in lb.per_layer_x_mse + lb.per_layer_as_mse + lb.per_layer_ao_mse)


def test_single_deviation():
    s, t = trace(1), trace(1)
    s.x[2] = T.Tensor(s.x[2].data.copy())
    s.x[2].data[0, 0, 0] += 0.5
    lb = distill_loss(s, t)
    n_el = s.x[2].data.size
    assert lb.l_trm == pytest.approx(0.25 / n_el, rel=1e-5)
    assert lb.per_layer_x_mse[2] == pytest.approx(0.25 / n_el, rel=1e-5)


def test_hand_toy_trm_and_output():
    # L = 1: two hidden states (embedding + layer output), one score tensor, one AO
    s = toy([[[1.0, 2.0]], [[0.0, 0.0]]], [[[[3.0]]]], [[[1.0, -1.0]]])
    t = toy([[[1.0, 0.0]], [[1.0, 1.0]]], [[[[1.0]]]], [[[0.0, 0.0]]])
    trm, xs, ss = loss_trm(s, t)
    # x: (0 + 4)/2 = 2, (1 + 1)/2 = 1; scores: 4
    assert xs == pytest.approx([2.0, 1.0], abs=1e-12)
    assert ss == pytest.approx([4.0], abs=1e-12)
    assert float(trm.data) == pytest.approx(7.0, abs=1e-6)
    out, aos = loss_output(s, t)
    assert float(out.data) == pytest.approx(1.0, abs=1e-6)


def test_pred_near_onehot_teacher():
    lg = T.Tensor(np.array([[10.0, -10.0]]))
    assert float(loss_pred(lg, lg).data) < 1e-3


@given(st.integers(2, 6), st.lists(st.floats(-5, 5), min_size=6, max_size=6))
@settings(max_examples=100)
def test_pred_uniform_teacher_gibbs(k, vals):
    student = T.Tensor(np.array([vals[:k]], np.float64))
    teacher = np.zeros((1, k))
    ce = float(loss_pred(student, teacher).data)
    assert ce >= math.log(k) - 1e-9
    if np.ptp(vals[:k]) == 0:
        assert ce == pytest.approx(math.log(k))


def test_pred_hand_two_class():
    sig = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
    pt = [sig(1), sig(-1)]
    logq = [math.log(sig(-1)), math.log(sig(1))]
    want = -(pt[0] * logq[0] + pt[1] * logq[1])
    got = float(loss_pred(T.Tensor(np.array([[0.0, 1.0]])), np.array([[1.0, 0.0]])).data)
    assert got == pytest.approx(want, abs=1e-6)


def test_pred_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_pred(T.Tensor(np.zeros((2, 3))), np.zeros((2, 2)))


def test_trace_depth_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_trm(trace(0), LayerTrace(x=[T.Tensor(np.zeros(1))]))


def test_pred_regression_is_mse():
    s = T.Tensor(np.array([[1.0], [3.0]]))
    assert float(loss_pred(s, np.array([[0.0], [1.0]]), regression=True).data) == pytest.approx(2.5)


def test_output_loss_gating_and_total():
    s, t = trace(2), trace(3)
    off = distill_loss(s, t, output_loss_active=False)
    on = distill_loss(s, t, output_loss_active=True, lambda_out=0.5)
    assert off.l_output == 0.0
    assert off.total == pytest.approx(off.l_trm + off.l_pred, rel=1e-6)
    assert on.total == pytest.approx(on.l_trm + on.l_pred + 0.5 * on.l_output, rel=1e-6)
    assert on.l_output > 0
    # AO mismatch is reported per layer either way
    assert off.per_layer_ao_mse == pytest.approx(on.per_layer_ao_mse)


@given(st.integers(0, 1000), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_losses_non_negative(a, b):
    lb = distill_loss(trace(a), trace(b), output_loss_active=True)
    assert lb.l_trm >= 0 and lb.l_pred >= 0 and lb.l_output >= 0


def test_label_term_added():
    s, t = trace(4), trace(5)
    base = distill_loss(s, t)
    lab = distill_loss(s, t, labels=np.array([0, 1, 2]))
    assert lab.l_label > 0
    assert lab.total == pytest.approx(base.total + lab.l_label, rel=1e-6)
