import numpy as np
import pytest

from uapdefend.errors import ValidationError
from uapdefend.nnet import adam_step, init_adam


def _reference_adam(params, grad_seq, lr0=0.01, b1=0.9, b2=0.999, eps=1e-8,
                    decay=0.9, decay_every=1000):
    """Hand-stepped ADAM recurrences, kept independent of the implementation."""
    p = {k: v.astype(np.float64).copy() for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v2 = {k: np.zeros_like(v) for k, v in p.items()}
    for t, grads in enumerate(grad_seq, start=1):
        lr = lr0 * decay ** ((t - 1) // decay_every)
        for k in p:
            g = grads[k].astype(np.float64)
            m[k] = b1 * m[k] + (1 - b1) * g
            v2[k] = b2 * v2[k] + (1 - b2) * g * g
            mh = m[k] / (1 - b1 ** t)
            vh = v2[k] / (1 - b2 ** t)
            p[k] = p[k] - lr * mh / (np.sqrt(vh) + eps)
    return p


def test_zero_gradient_is_fixed_point():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = init_adam(params, lr=0.01)
    out = params
    for _ in range(25):
        out = adam_step(out, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(out["w"], params["w"])


def test_first_step_is_signed_lr():
    # fresh state, one step: update = -lr * g / (|g| + eps)
    g = np.array([0.5, -3.0, 0.0])
    params = {"w": np.zeros(3)}
    state = init_adam(params, lr=0.01)
    out = adam_step(params, {"w": g}, state)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(out["w"], expected, rtol=1e-12)


def test_matches_hand_stepped_reference_over_many_steps():
    rng = np.random.default_rng(7)
    params = {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 3))}
    grad_seq = [
        {"a": rng.standard_normal(5), "b": rng.standard_normal((2, 3))}
        for _ in range(50)
    ]
    state = init_adam(params, lr=0.01)
    out = {k: v.copy() for k, v in params.items()}
    for grads in grad_seq:
        out = adam_step(out, grads, state)
    ref = _reference_adam(params, grad_seq)
    for k in params:
        np.testing.assert_allclose(out[k], ref[k], rtol=1e-10, atol=1e-12)


def test_learning_rate_decay_schedule():
    params = {"w": np.zeros(1)}
    state = init_adam(params, lr=0.01)
    out = params
    zero = {"w": np.zeros(1)}
    for _ in range(2000):
        out = adam_step(out, zero, state)
    assert state.step == 2000
    assert state.learning_rate == pytest.approx(0.01 * 0.81, rel=1e-12)
    # decay applies exactly at 1000-step multiples
    assert 0.01 * 0.9 ** 0 == pytest.approx(
        init_adam(params, lr=0.01).learning_rate
    )


def test_decay_boundary_uses_pre_decay_rate_within_block():
    params = {"w": np.array([0.0])}
    state = init_adam(params, lr=0.01)
    g = {"w": np.array([1.0])}
    out = params
    for i in range(1000):
        out = adam_step(out, g, state)
    assert state.learning_rate == pytest.approx(0.009, rel=1e-12)
    ref = _reference_adam(params, [g] * 1000)
    np.testing.assert_allclose(out["w"], ref["w"], rtol=1e-10)


def test_shape_mismatch_rejected():
    params = {"w": np.zeros(3)}
    state = init_adam(params)
    with pytest.raises(ValidationError):
        adam_step(params, {"w": np.zeros(4)}, state)
    with pytest.raises(ValidationError):
        adam_step(params, {"v": np.zeros(3)}, state)


def test_moments_match_parameter_shapes():
    params = {"w": np.zeros((2, 3)), "b": np.zeros(4)}
    state = init_adam(params)
    for k, p in params.items():
        assert state.first_moment[k].shape == p.shape
        assert state.second_moment[k].shape == p.shape
