import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from saddle_cl.tensor import (DimensionError, DomainError, MlpModel, NumericError,
                              apply_update, clone_model, forward, gradcheck, init_mlp,
                              loss_and_grads, predict, softmax_xent)


def naive_forward(model, batch):
    # independent oracle: explicit loops, no matrix products
    h = [list(row) for row in batch]
    for w, b, act in zip(model.weights, model.biases, model.activations):
        out = []
        for row in h:
            z = []
            for j in range(w.shape[0]):
                s = b[j]
                for i in range(w.shape[1]):
                    s += w[j, i] * row[i]
                z.append(max(s, 0.0) if act == "relu" else s)
            out.append(z)
        h = out
    return np.array(h)


def fd_grad(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


# ------------------------------------------------------------------ forward


def test_identity_layer_returns_input():
    model = MlpModel([np.eye(3)], [np.zeros(3)], ["identity"])
    x = np.array([[1.0, -2.0, 3.5]])
    assert np.array_equal(forward(model, x), x)


def test_relu_clamps_negative_preactivation():
    model = MlpModel([np.array([[2.0]])], [np.array([1.0])], ["relu"])
    assert forward(model, np.array([[-3.0]])).tolist() == [[0.0]]


def test_forward_matches_loop_oracle():
    model = init_mlp([5, 7, 3], seed=3)
    x = np.random.default_rng(0).standard_normal((4, 5))
    np.testing.assert_allclose(forward(model, x), naive_forward(model, x), rtol=0, atol=1e-12)


def test_forward_shape_error_names_both_shapes():
    model = init_mlp([4, 2], seed=0)
    with pytest.raises(DimensionError, match=r"\(2, 3\).*4"):
        forward(model, np.zeros((2, 3)))


def test_layers_must_chain():
    with pytest.raises(DimensionError):
        MlpModel([np.zeros((3, 2)), np.zeros((2, 4))], [np.zeros(3), np.zeros(2)],
                 ["relu", "identity"])


def test_forward_rejects_nonfinite_logits():
    model = MlpModel([np.array([[np.inf]])], [np.zeros(1)], ["identity"])
    with pytest.raises(NumericError):
        forward(model, np.array([[1.0]]))


# --------------------------------------------------------------- loss/grads


def test_uniform_logits_give_log_c():
    for c in (2, 5, 10):
        model = MlpModel([np.zeros((c, 3))], [np.zeros(c)], ["identity"])
        loss, _ = loss_and_grads(model, np.ones((4, 3)), np.arange(4) % c)
        assert loss == pytest.approx(math.log(c), abs=1e-15)


def test_frozen_loss_and_gradients():
    # reference values from an independent autograd implementation (float64)
    model = init_mlp([3, 4, 2], seed=7)
    x = np.array([[0.345584192064786, 0.8216181435011584, 0.33043707618338714],
                  [-1.303157231604361, 0.9053558666731177, 0.4463745723640113],
                  [-0.5369532353602852, 0.5811181041963531, 0.36457239618607573]])
    loss, g = loss_and_grads(model, x, np.array([0, 1, 1]), want_input_grads=True)
    assert loss == pytest.approx(1.5464317768245361, rel=1e-13)
    assert g.param_grads[0][1, 2] == pytest.approx(-0.04645296051940203, rel=1e-12)
    assert g.input_grads[2, 0] == pytest.approx(-0.1767656770539402, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = init_mlp([4, 6, 5, 3], seed=seed)
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, size=5)
    _, g = loss_and_grads(model, x, y, want_input_grads=True)

    def f():
        return loss_and_grads(model, x, y)[0]

    for p, ana in zip(model.params(), g.param_grads):
        num = fd_grad(f, p)
        assert np.all(np.abs(num - ana) <= np.maximum(1e-4 * np.abs(ana), 1e-7))
    num = fd_grad(f, x)
    assert np.all(np.abs(num - g.input_grads) <= np.maximum(1e-4 * np.abs(g.input_grads), 1e-7))


def test_input_grads_only_when_requested():
    model = init_mlp([3, 2], seed=0)
    _, g = loss_and_grads(model, np.ones((2, 3)), [0, 1])
    assert g.input_grads is None
    _, g = loss_and_grads(model, np.ones((2, 3)), [0, 1], want_input_grads=True)
    assert g.input_grads.shape == (2, 3)


def test_label_out_of_range_is_domain_error():
    model = init_mlp([3, 2], seed=0)
    with pytest.raises(DomainError):
        loss_and_grads(model, np.ones((2, 3)), [0, 2])
    with pytest.raises(DomainError):
        loss_and_grads(model, np.ones((1, 3)), [-1])


def test_empty_batch_is_domain_error():
    model = init_mlp([3, 2], seed=0)
    with pytest.raises(DomainError):
        loss_and_grads(model, np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_weighted_loss_equals_mean_for_uniform_weights():
    model = init_mlp([3, 4, 3], seed=1)
    x = np.random.default_rng(2).standard_normal((6, 3))
    y = np.arange(6) % 3
    l1, g1 = loss_and_grads(model, x, y)
    l2, g2 = loss_and_grads(model, x, y, weights=np.full(6, 1 / 6))
    assert l1 == pytest.approx(l2, rel=1e-14)
    for a, b in zip(g1.param_grads, g2.param_grads):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_mask_restricts_softmax():
    logits = np.array([[1.0, 2.0, 3.0, 4.0]])
    mask = np.array([[True, True, False, False]])
    losses, probs = softmax_xent(logits, np.array([1]), mask)
    assert probs[0, 2] == probs[0, 3] == 0.0
    assert losses[0] == pytest.approx(math.log(1 + math.exp(-1.0)), rel=1e-14)


def test_label_on_masked_unit_rejected():
    model = init_mlp([2, 4], seed=0)
    mask = np.array([[True, True, False, False]])
    with pytest.raises(DomainError):
        loss_and_grads(model, np.ones((1, 2)), [3], mask=mask)


@settings(max_examples=50, deadline=None)
@given(logits=hnp.arrays(np.float64, (4, 5), elements=st.floats(-50, 50)),
       targets=hnp.arrays(np.int64, 4, elements=st.integers(0, 4)))
def test_cross_entropy_nonnegative_and_probs_normalized(logits, targets):
    losses, probs = softmax_xent(logits, targets)
    assert np.all(losses >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_same_seed_bitwise_identical(seed):
    a, b = init_mlp([4, 3, 2], seed=seed), init_mlp([4, 3, 2], seed=seed)
    x = np.random.default_rng(seed).standard_normal((3, 4))
    la, ga = loss_and_grads(a, x, [0, 1, 0], want_input_grads=True)
    lb, gb = loss_and_grads(b, x, [0, 1, 0], want_input_grads=True)
    assert la == lb
    assert np.array_equal(ga.flat(), gb.flat())
    assert np.array_equal(ga.input_grads, gb.input_grads)


def test_library_gradcheck_passes():
    report = gradcheck(draws=20, seed=1)
    assert report.passed
    assert report.components > 0


# ------------------------------------------------------------------- update


def test_zero_step_leaves_model_bitwise_unchanged():
    model = init_mlp([3, 4, 2], seed=0)
    grads = [np.ones_like(p) for p in model.params()]
    assert np.array_equal(apply_update(model, grads, 0.0).flat(), model.flat())


def test_single_parameter_arithmetic():
    model = MlpModel([np.array([[1.0]])], [np.array([0.0])], ["identity"])
    out = apply_update(model, [np.array([[2.0]]), np.array([0.0])], 0.5)
    assert out.weights[0][0, 0] == 0.0


def test_quadratic_bowl_converges():
    model = MlpModel([np.array([[0.0]])], [np.array([0.0])], ["identity"])
    for _ in range(100):
        p = model.weights[0][0, 0]
        model = apply_update(model, [np.array([[2 * (p - 3)]]), np.array([0.0])], 0.1)
    # contraction factor 0.8 per step: 3 * 0.8**100 ~ 6e-10
    assert abs(model.weights[0][0, 0] - 3) < 1e-6


def test_update_rejects_nonfinite_gradient():
    model = init_mlp([2, 2], seed=0)
    grads = [np.full_like(p, np.nan) for p in model.params()]
    with pytest.raises(NumericError):
        apply_update(model, grads, 0.1)


def test_update_rejects_incongruent_gradient():
    model = init_mlp([2, 2], seed=0)
    with pytest.raises(DimensionError):
        apply_update(model, [np.zeros((3, 3)), np.zeros(2)], 0.1)


def test_update_is_pure():
    model = init_mlp([3, 2], seed=0)
    before = model.flat().copy()
    apply_update(model, [np.ones_like(p) for p in model.params()], 1.0)
    assert np.array_equal(model.flat(), before)


# -------------------------------------------------------------------- clone


def test_clone_is_independent_and_equal():
    model = init_mlp([3, 4, 2], seed=5)
    copy = clone_model(model)
    x = np.ones((2, 3))
    assert np.array_equal(forward(copy, x), forward(model, x))
    copy.weights[0][0, 0] += 1.0
    assert not np.array_equal(copy.flat(), model.flat())
    assert np.array_equal(clone_model(clone_model(model)).flat(), model.flat())


def test_flat_round_trip_preserves_parameter_count():
    model = init_mlp([5, 3, 4], seed=2)
    again = model.from_flat(model.flat())
    assert again.n_params == model.n_params == 5 * 3 + 3 + 3 * 4 + 4
    assert np.array_equal(again.flat(), model.flat())


def test_predict_respects_mask():
    model = MlpModel([np.eye(3)], [np.zeros(3)], ["identity"])
    x = np.array([[0.0, 1.0, 5.0]])
    assert predict(model, x)[0] == 2
    assert predict(model, x, np.array([[True, True, False]]))[0] == 1
