"""Finite-difference oracle for every layer kind, run at float64.

Each case builds a small network ending in the cross-entropy head, perturbs
individual inputs/parameters by central differences and compares against
the analytic gradients.
"""

import numpy as np
import pytest

from conftest import rel_err

from uapdefend.nnet import Network

TOL = 1e-4

CASES = {
    "conv_same": [{"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 4},
                  {"kind": "dense", "units": 3}],
    "conv_same_stride2": [{"kind": "conv_same", "kernel": 3, "stride": 2, "maps": 4},
                          {"kind": "dense", "units": 3}],
    "relu": [{"kind": "conv_same", "kernel": 1, "stride": 1, "maps": 4},
             {"kind": "relu"},
             {"kind": "dense", "units": 3}],
    "maxpool2": [{"kind": "maxpool2"}, {"kind": "dense", "units": 3}],
    "residual_block": [{"kind": "conv_same", "kernel": 1, "stride": 1, "maps": 4},
                       {"kind": "residual_block", "kernel": 3, "maps": 4},
                       {"kind": "dense", "units": 3}],
    "dense": [{"kind": "dense", "units": 6}, {"kind": "relu"},
              {"kind": "dense", "units": 3}],
    "softmax_xent": [{"kind": "dense", "units": 3}],
}


def _check_case(specs, seed):
    rng = np.random.default_rng(seed)
    h = int(rng.integers(2, 5)) * 2
    w = int(rng.integers(2, 5)) * 2
    c = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    net = Network.from_specs((h, w, c), specs, seed=seed, dtype=np.float64)
    x = rng.standard_normal((n, h, w, c))
    labels = rng.integers(0, 3, size=n)

    loss, grads, gin = net.loss_and_grads(x, labels)

    def f(xv):
        return net.loss_and_grads(xv, labels, want_param_grads=False,
                                  want_input_grad=False)[0]

    # input gradient at a handful of coordinates
    step = 1e-6
    for _ in range(6):
        i = tuple(int(rng.integers(0, s)) for s in x.shape)
        xp = x.copy(); xp[i] += step
        xm = x.copy(); xm[i] -= step
        fd = (f(xp) - f(xm)) / (2 * step)
        assert rel_err(gin[i], fd, floor=1e-6) <= TOL, f"input grad at {i}"

    # parameter gradients at a handful of coordinates per parameter
    params = net.param_dict()
    for name, p in params.items():
        for _ in range(3):
            i = tuple(int(rng.integers(0, s)) for s in p.shape)
            orig = p[i]
            p[i] = orig + step
            fp = f(x)
            p[i] = orig - step
            fm = f(x)
            p[i] = orig
            fd = (fp - fm) / (2 * step)
            assert rel_err(grads[name][i], fd, floor=1e-6) <= TOL, f"{name} at {i}"


@pytest.mark.parametrize("kind", sorted(CASES))
def test_layer_kind_matches_finite_differences(kind):
    for seed in (0, 1, 2):
        _check_case(CASES[kind], seed)


def test_gradient_shapes_match_parameters():
    net = Network.from_specs(
        (4, 4, 2),
        [{"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 3},
         {"kind": "dense", "units": 4}],
        seed=0,
        dtype=np.float64,
    )
    x = np.random.default_rng(0).standard_normal((2, 4, 4, 2))
    _, grads, gin = net.loss_and_grads(x, np.array([0, 1]))
    assert gin.shape == x.shape
    for name, p in net.param_dict().items():
        assert grads[name].shape == p.shape
