import numpy as np
import pytest

from evogan.errors import DimensionError, NumericError, ParameterError
from evogan.numerics import (
    AdamState,
    OptimHyper,
    activate,
    activate_backward,
    adam_step,
    affine_backward,
    affine_forward,
    dropout,
    dropout_backward,
    grad_check,
    make_rng,
)


# ---------------------------------------------------------------------------
# affine


def test_affine_identity():
    w = np.eye(2)
    out = affine_forward(w, np.zeros(2), np.array([[2.0, 3.0]]))
    assert np.array_equal(out, [[2.0, 3.0]])


def test_affine_direct_arithmetic():
    # hand-computed: W @ [1, 1] + [1, 1] = [4, 8]
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = affine_forward(w, np.array([1.0, 1.0]), np.array([[1.0, 1.0]]))
    assert np.allclose(out, [[4.0, 8.0]])


def test_affine_zero_weights():
    w = np.zeros((3, 5))
    b = np.array([7.0, 7.0, 7.0])
    out = affine_forward(w, b, np.arange(5.0).reshape(1, 5))
    assert np.array_equal(out, [[7.0, 7.0, 7.0]])


def test_affine_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\)"):
        affine_forward(np.zeros((2, 3)), np.zeros(2), np.zeros((1, 4)))


def test_affine_linearity_in_x():
    rng = make_rng(1, "lin")
    w = rng.normal(size=(4, 6))
    b = rng.normal(size=4)
    x1 = rng.normal(size=(3, 6))
    x2 = rng.normal(size=(3, 6))
    lhs = affine_forward(w, b, x1 + x2)
    rhs = affine_forward(w, b, x1) + affine_forward(w, b, x2) - b
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_affine_backward_zero_grad():
    rng = make_rng(2)
    w, b, x = rng.normal(size=(3, 4)), rng.normal(size=3), rng.normal(size=(5, 4))
    gw, gb, gx = affine_backward(w, b, x, np.zeros((5, 3)))
    assert not gw.any() and not gb.any() and not gx.any()


def test_affine_backward_identity_jacobian():
    grad_out = np.array([[1.5, -2.0]])
    _, _, gx = affine_backward(np.eye(2), np.zeros(2), np.array([[0.3, 0.7]]), grad_out)
    assert np.array_equal(gx, grad_out)


def test_affine_backward_matches_finite_differences():
    rng = make_rng(3)
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    x0 = rng.normal(size=(2, 4))
    c = rng.normal(size=(2, 3))  # fixed upstream weighting -> scalar loss

    def loss_wrt_x(x):
        out = affine_forward(w, b, x)
        _, _, gx = affine_backward(w, b, x, c)
        return float(np.sum(c * out)), gx

    assert grad_check(loss_wrt_x, x0.copy()) < 1e-4

    def loss_wrt_w(wf):
        wm = wf.reshape(3, 4)
        out = affine_forward(wm, b, x0)
        gw, _, _ = affine_backward(wm, b, x0, c)
        return float(np.sum(c * out)), gw.reshape(wf.shape)

    assert grad_check(loss_wrt_w, w.reshape(1, -1).copy()) < 1e-4


# ---------------------------------------------------------------------------
# activations


def test_activation_definitions():
    assert activate(np.array([[-5.0]]), "relu")[0, 0] == 0.0
    assert activate(np.array([[-1.0]]), "leaky_relu", 0.2)[0, 0] == pytest.approx(-0.2)
    assert activate(np.array([[3.0]]), "leaky_relu", 0.2)[0, 0] == 3.0


def test_activation_backward_masks():
    x = np.array([[-2.0, 0.5]])
    g = np.ones_like(x)
    assert np.array_equal(activate_backward(g, x, "relu"), [[0.0, 1.0]])
    assert np.array_equal(activate_backward(g, x, "leaky_relu", 0.2), [[0.2, 1.0]])


# ---------------------------------------------------------------------------
# dropout


def test_dropout_eval_is_identity():
    rng = make_rng(4)
    x = rng.normal(size=(10, 10))
    out, mask = dropout(x, 0.7, rng, training=False)
    assert out is x or np.array_equal(out, x)
    assert np.array_equal(mask, np.ones_like(x))


def test_dropout_zero_rate_is_identity():
    rng = make_rng(5)
    x = rng.normal(size=(4, 4))
    out, _ = dropout(x, 0.0, rng, training=True)
    assert np.array_equal(out, x)


def test_dropout_monte_carlo():
    rng = make_rng(6)
    x = np.ones((100, 1000))
    out, mask = dropout(x, 0.5, rng, training=True)
    kept = np.count_nonzero(mask) / mask.size
    assert abs(kept - 0.5) < 0.01
    # inverted scaling keeps the expectation: mean(out) ~ mean(x) = 1
    assert abs(out.mean() - 1.0) < 0.02


def test_dropout_invalid_rate():
    with pytest.raises(ParameterError):
        dropout(np.zeros((1, 1)), 1.0, make_rng(0), training=True)


# ---------------------------------------------------------------------------
# adam


def test_adam_zero_gradient_no_change():
    p = np.array([[1.0, -2.0]])
    state = AdamState.zeros_like(p)
    adam_step(p, np.zeros_like(p), state, OptimHyper(learning_rate=0.1))
    assert np.array_equal(p, [[1.0, -2.0]])
    assert state.step_count == 1


def test_adam_first_step_magnitude():
    # fresh state, unit gradient: bias correction makes the first step ~ lr
    p = np.array([[1.0]])
    adam_step(p, np.array([[1.0]]), AdamState.zeros_like(p), OptimHyper(learning_rate=0.1))
    assert p[0, 0] == pytest.approx(0.9, abs=1e-6)


def test_adam_converges_on_quadratic():
    p = np.array([[1.0]])
    state = AdamState.zeros_like(p)
    hyper = OptimHyper(learning_rate=0.05)
    for _ in range(100):
        adam_step(p, 2.0 * p, state, hyper)
    assert abs(p[0, 0]) < 0.1
    assert state.step_count == 100


def test_adam_shape_mismatch():
    p = np.zeros((2, 2))
    with pytest.raises(DimensionError):
        adam_step(p, np.zeros((2, 3)), AdamState.zeros_like(p), OptimHyper())


def test_adam_rejects_nonfinite_result():
    p = np.array([[1.0]])
    with pytest.raises(NumericError):
        adam_step(p, np.array([[np.inf]]), AdamState.zeros_like(p), OptimHyper())


def test_optim_hyper_validation():
    with pytest.raises(ParameterError):
        OptimHyper(learning_rate=0.0)
    with pytest.raises(ParameterError):
        OptimHyper(beta1=0.999, beta2=0.5)


# ---------------------------------------------------------------------------
# grad_check


def test_grad_check_exact_for_linear():
    rng = make_rng(7)
    c = rng.normal(size=(2, 3))

    def f(x):
        return float(np.sum(c * x)), c

    assert grad_check(f, rng.normal(size=(2, 3))) < 1e-8


def test_grad_check_affine_leaky_composite():
    rng = make_rng(8)
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    c = rng.normal(size=(2, 3))

    def f(x):
        pre = affine_forward(w, b, x)
        out = activate(pre, "leaky_relu", 0.2)
        g = activate_backward(c, pre, "leaky_relu", 0.2)
        _, _, gx = affine_backward(w, b, x, g)
        return float(np.sum(c * out)), gx

    assert grad_check(f, rng.normal(size=(2, 4))) < 1e-4


def test_grad_check_with_frozen_dropout_mask():
    rng = make_rng(9)
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    c = rng.normal(size=(2, 3))
    _, mask = dropout(np.zeros((2, 3)), 0.5, make_rng(10), training=True)

    def f(x):
        pre = affine_forward(w, b, x)
        out = pre * mask
        gx = affine_backward(w, b, x, dropout_backward(c, mask))[2]
        return float(np.sum(c * out)), gx

    assert grad_check(f, rng.normal(size=(2, 4))) < 1e-4


def test_grad_check_layer_kinds_random_points():
    rng = make_rng(11)
    for trial in range(20):
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=3)
        c = rng.normal(size=(2, 3))
        kind = ("relu", "leaky_relu")[trial % 2]

        def f(x):
            pre = affine_forward(w, b, x)
            out = activate(pre, kind, 0.2)
            gx = affine_backward(w, b, x, activate_backward(c, pre, kind, 0.2))[2]
            return float(np.sum(c * out)), gx

        assert grad_check(f, rng.normal(size=(2, 5))) < 1e-4


# ---------------------------------------------------------------------------
# rng


def test_rng_streams_deterministic_and_independent():
    a1 = make_rng(42, "warmup").normal(size=5)
    a2 = make_rng(42, "warmup").normal(size=5)
    b = make_rng(42, "search").normal(size=5)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
