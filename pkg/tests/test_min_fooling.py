"""Inner-solver oracles: closed-form linear case and a brute-force grid
search for near-minimality on a 2-D toy classifier."""

import numpy as np
import pytest

from uapdefend.nnet import Dense, Network
from uapdefend.target import TargetClassifier, classify
from uapdefend.uap import InnerSolverParams, min_fooling_vector


def _linear_target(w, b):
    """Two-class linear model with logit difference f(x) = w.x + b."""
    net = Network(
        (1, 1, len(w)),
        [Dense(len(w), 2, rng=np.random.default_rng(0), dtype=np.float32)],
    )
    dense = net.layers[0]
    dense.W = np.stack([np.zeros_like(w), w], axis=1).astype(np.float32)
    dense.b = np.array([0.0, b], dtype=np.float32)
    return TargetClassifier(net=net, num_classes=2, input_shape=(1, 1, len(w)), frozen=True)


def test_binary_linear_closed_form():
    w = np.array([2.0, -1.0])
    b = 0.5
    tc = _linear_target(w, b)
    x = np.array([[[[-2.0, 0.5]]]], dtype=np.float32)[0]  # f(x) = -4.0 (class 0 wins)
    overshoot = 0.02
    dv = min_fooling_vector(tc, x, InnerSolverParams(overshoot=overshoot, top_k=2))
    assert dv is not None
    f_x = float(w @ x.ravel() + b)
    expected = -(1 + overshoot) * f_x * w / float(w @ w)
    # the solver adds a small crossing epsilon; compare within 1%
    np.testing.assert_allclose(dv.ravel(), expected, rtol=0.01)
    # and the result actually flips the label
    assert classify(tc, x + dv.reshape(x.shape)) != classify(tc, x)


def test_always_fools_away_from_current_prediction():
    rng = np.random.default_rng(4)
    w = rng.standard_normal(6)
    tc = _linear_target(w, 0.0)
    for _ in range(10):
        x = rng.standard_normal((1, 1, 6)).astype(np.float32)
        before = classify(tc, x)
        dv = min_fooling_vector(tc, x, InnerSolverParams(top_k=2))
        assert dv is not None
        assert classify(tc, x + dv) != before


def _toy_2d_target(seed=0):
    """Small nonlinear 2-class net over 2-D inputs."""
    net = Network.from_specs(
        (1, 1, 2),
        [{"kind": "dense", "units": 8}, {"kind": "relu"}, {"kind": "dense", "units": 2}],
        seed=seed,
    )
    return TargetClassifier(net=net, num_classes=2, input_shape=(1, 1, 2), frozen=True)


def test_norm_near_grid_search_minimum():
    # Greedy linearization is near-minimal away from ReLU kink
    # intersections; the occasional kink point lands on a farther boundary,
    # so the 10% bound is asserted on the median and the 80% quantile.
    tc = _toy_2d_target(seed=2)
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(20):
        x = (rng.standard_normal((1, 1, 2)) * 2.0).astype(np.float32)
        before = classify(tc, x)
        dv = min_fooling_vector(tc, x, InnerSolverParams(overshoot=0.02, top_k=2))
        if dv is None:
            continue
        # brute force: smallest-radius fooling direction on a fine polar grid
        radii = np.linspace(1e-3, np.linalg.norm(dv) * 2.5, 400)
        angles = np.linspace(0, 2 * np.pi, 720, endpoint=False)
        best = None
        for r in radii:
            offs = np.stack(
                [r * np.cos(angles), r * np.sin(angles)], axis=1
            ).astype(np.float32)
            batch = x.ravel()[None] + offs
            preds = np.argmax(tc.net.forward(batch.reshape(-1, 1, 1, 2)), axis=1)
            if np.any(preds != before):
                best = r
                break
        assert best is not None, "grid search found no fooling direction"
        ratios.append(np.linalg.norm(dv) / best)
    assert len(ratios) >= 10
    ratios = np.sort(ratios)
    assert np.median(ratios) <= 1.10
    assert ratios[int(0.8 * (len(ratios) - 1))] <= 1.10
