import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tiqat import tensor as T
from tiqat.errors import NonFiniteInput, PlanMismatch
from tiqat.model import ModelConfig, forward, init_model
from tiqat.quant import (GROUPS, MATRICES, QuantPlan, apply_plan, least_squares_scale,
                         materialize, ste_forward, ternarize)

weights = hnp.arrays(np.float32, st.integers(1, 16),
                     elements=st.floats(-10, 10, width=32, allow_subnormal=False))


def twn_objective(w, codes):
    s = least_squares_scale(w, codes)
    return float(np.sum((w - s * codes) ** 2)), s


def test_all_ones():
    tw = ternarize(np.ones(4, np.float32))
    np.testing.assert_array_equal(tw.codes, [1, 1, 1, 1])
    assert tw.scale == 1.0
    np.testing.assert_array_equal(tw.reconstruct(), np.ones(4))


def test_all_zeros():
    tw = ternarize(np.zeros(5, np.float32))
    assert not tw.codes.any() and tw.scale == 0.0


def test_worked_example():
    w = np.array([0.1, 0.2, -0.3, 0.9], np.float32)
    tw = ternarize(w)
    assert 0.7 * np.abs(w).mean() == pytest.approx(0.2625)
    np.testing.assert_array_equal(tw.codes, [0, 0, -1, 1])
    assert float(tw.scale) == pytest.approx(0.6, abs=1e-7)


def test_worked_example_exhaustive_oracle():
    """Among all 3^4 code vectors that respect the threshold's support (|w| > delta
    exactly where codes are non-zero) and sign, the analytic answer is the unique
    member; and with its closed-form scale it is optimal among codes of the same support."""
    w = np.array([0.1, 0.2, -0.3, 0.9])
    delta = 0.7 * np.abs(w).mean()
    tw = ternarize(w.astype(np.float32))
    results = {}
    for c in itertools.product((-1, 0, 1), repeat=4):
        c = np.array(c)
        results[tuple(c)] = twn_objective(w, c)
    # codes consistent with the threshold rule
    consistent = [c for c in results
                  if all((ci != 0) == (abs(wi) > delta) and (ci == 0 or ci == np.sign(wi))
                         for ci, wi in zip(c, w))]
    assert consistent == [tuple(tw.codes.tolist())]
    # for this support, the analytic scale is the exhaustive optimum over sign choices
    support = [c for c in results if all((ci != 0) == (abs(wi) > delta) for ci, wi in zip(c, w))]
    best = min(support, key=lambda c: results[c][0])
    assert best == tuple(tw.codes.tolist())
    assert results[best][1] == pytest.approx(float(tw.scale), abs=1e-6)


def test_non_finite_rejected():
    with pytest.raises(NonFiniteInput):
        ternarize(np.array([1.0, np.nan], np.float32))


@given(weights)
@settings(max_examples=300)
def test_scale_is_least_squares(w):
    tw = ternarize(w)
    assert abs(float(tw.scale) - least_squares_scale(w, tw.codes)) < 1e-6 * max(1.0, float(tw.scale))


def test_scale_optimality_1000_vectors():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = rng.standard_normal(rng.integers(1, 17)).astype(np.float32)
        tw = ternarize(w)
        assert abs(float(tw.scale) - least_squares_scale(w, tw.codes)) < 1e-6


@given(weights)
@settings(max_examples=200)
def test_codes_and_scale_invariants(w):
    tw = ternarize(w)
    assert set(np.unique(tw.codes)) <= {-1, 0, 1}
    assert tw.scale >= 0
    assert (tw.scale == 0) == (not tw.codes.any())


@given(weights)
@settings(max_examples=200)
def test_reconstruction_error_bounded_by_norm(w):
    w64 = w.astype(np.float64)
    err = np.linalg.norm(w64 - ternarize(w).reconstruct())
    assert err <= np.linalg.norm(w64) * (1 + 1e-6) + 1e-6


@given(weights)
@settings(max_examples=200)
def test_idempotent_on_support(w):
    tw = ternarize(w)
    again = ternarize(tw.reconstruct())
    nz = tw.codes != 0
    np.testing.assert_array_equal(again.codes[nz], tw.codes[nz])


def test_per_row_granularity():
    w = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 4.0]], np.float32)
    tw = ternarize(w, "per_row")
    np.testing.assert_array_equal(tw.codes, [[1, 1, 1], [0, 0, 1]])
    np.testing.assert_allclose(tw.scale, [1.0, 4.0])
    np.testing.assert_allclose(tw.reconstruct(), w)


def test_ste_forward_value_and_identity_grad():
    w = T.Tensor(np.random.default_rng(0).standard_normal((4, 3)), requires_grad=True)
    tw = ternarize(w)
    with T.Tape() as tape:
        out = ste_forward(w)
        np.testing.assert_array_equal(out.data, (tw.scale * tw.codes).astype(np.float32))
        tape.backward(T.sum_all(out))
    np.testing.assert_array_equal(w.grad, np.ones((4, 3)))


def test_qat_toy_quadratic_descends():
    rng = np.random.default_rng(0)
    target = rng.standard_normal(16).astype(np.float32)
    w = T.Tensor(rng.standard_normal(16), requires_grad=True)
    losses = []
    for _ in range(101):
        w.grad = None
        with T.Tape() as tape:
            loss = T.mse(ste_forward(w), T.Tensor(target))
            tape.backward(loss)
        losses.append(float(loss.data))
        w.data -= 0.02 * w.grad
    down = sum(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
    assert down >= 90


@pytest.fixture
def model():
    return init_model(ModelConfig(vocab=7, num_classes=3, L=2, d=8, H=2, d_ff=12, n=6), 0)


def test_plan_groups():
    assert GROUPS == {"GEN": ("W_Q", "W_K"), "PROP": ("W_V", "W_O"), "FFN": ("W_1", "W_2")}
    plan = QuantPlan.from_groups(2, ["FFN"])
    assert all(plan.layers[i] == {"W_1", "W_2"} for i in range(2))
    assert QuantPlan.full(1).layers[0] == frozenset(MATRICES)


def test_plan_rejects_unknown_matrix():
    with pytest.raises(PlanMismatch):
        QuantPlan((frozenset({"W_X"}),))


def test_plan_json_round_trip():
    plan = QuantPlan.from_groups(3, ["GEN", "FFN"])
    assert QuantPlan.from_json(plan.to_json()) == plan


def test_apply_plan_length_mismatch(model):
    with pytest.raises(PlanMismatch):
        apply_plan(model, QuantPlan.full(3))


def test_all_false_plan_is_full_precision(model):
    x = np.random.default_rng(1).integers(0, 7, (3, 6))
    a, _ = forward(model, x)
    b, _ = apply_plan(model, QuantPlan.none(2))(x)
    assert a.data.tobytes() == b.data.tobytes()


def test_ffn_only_plan_keeps_first_scores(model):
    x = np.random.default_rng(2).integers(0, 7, (3, 6))
    _, fp = forward(model, x)
    _, q = apply_plan(model, QuantPlan.from_groups(2, ["FFN"]))(x)
    assert q.scores[0].data.tobytes() == fp.scores[0].data.tobytes()
    assert q.x[1].data.tobytes() != fp.x[1].data.tobytes()


def test_plan_flags_only_chosen_matrices(model):
    x = np.random.default_rng(3).integers(0, 7, (2, 6))
    plan = QuantPlan.from_groups(2, ["PROP"])
    _, tr = apply_plan(model, plan)(x)
    _, ref = forward(materialize(model, plan), x)
    np.testing.assert_allclose(tr.x[-1].data, ref.x[-1].data, atol=1e-6)
    # materialize never touches embeddings, biases, norms or head
    m = materialize(model, QuantPlan.full(2))
    for name, t in model.named_parameters():
        if name.split(".")[-1] not in MATRICES:
            assert m_param(m, name).tobytes() == t.data.tobytes()


def m_param(model, name):
    return dict(model.named_parameters())[name].data
