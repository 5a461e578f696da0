import math

import numpy as np
import pytest

from gradcheck import check_msl_loss, check_nd, check_pre_loss
from evmhunt.distill import (
    LossConfig,
    feature_mse_baseline,
    feature_mse_baseline_grad,
    init_neurons,
    mk_loss,
    msl_loss,
    msl_loss_grad,
    nd_forward,
    pre_loss,
    pre_loss_grad_logit,
    softmax_entropy,
)

TOL = 1e-4


def test_nd_identity_neuron_returns_input(rng):
    h = rng.normal(size=4)
    p = {"nd.W": np.eye(4)[None], "nd.b": np.zeros((1, 4))}
    out, _ = nd_forward(h, p, "identity")
    assert np.array_equal(out, h)


def test_nd_duplicate_neurons_equal_single(rng):
    single = init_neurons(1, 5, 3, rng)
    single["nd.b"] = rng.normal(size=(1, 3))
    many = {k: np.repeat(v, 4, axis=0) for k, v in single.items()}
    h = rng.normal(size=5)
    a, _ = nd_forward(h, single)
    b, _ = nd_forward(h, many)
    assert np.allclose(a, b, rtol=1e-15, atol=1e-16)


@pytest.mark.parametrize("activation", ["tanh", "sigmoid", "identity"])
def test_nd_three_neurons_scalar_oracle(rng, activation):
    act = {"tanh": math.tanh, "sigmoid": lambda v: 1 / (1 + math.exp(-v)), "identity": lambda v: v}[activation]
    p = init_neurons(3, 4, 2, rng)
    p["nd.b"] = rng.normal(size=(3, 2))
    h = rng.normal(size=4)
    expected = [
        sum(act(p["nd.b"][j, d] + sum(p["nd.W"][j, d, s] * h[s] for s in range(4))) for j in range(3)) / 3
        for d in range(2)
    ]
    out, _ = nd_forward(h, p, activation)
    assert np.allclose(out, expected, rtol=1e-13)


def test_nd_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        nd_forward(np.zeros(3), init_neurons(2, 4, 2, rng))
    with pytest.raises(ValueError):
        init_neurons(0, 4, 2, rng)


def test_pre_loss_values():
    assert abs(pre_loss(0.5, 1) - math.log(2)) <= 1e-12
    assert pre_loss([1.0, 0.0], [1, 0]) == pytest.approx(0.0, abs=1e-11)
    ys, ts = [0.9, 0.2], [1, 1]
    each = [-math.log(0.9), -math.log(0.2)]
    assert pre_loss(ys, ts) == pytest.approx(sum(each) / 2, rel=1e-14)
    with pytest.raises(ValueError):
        pre_loss([0.5, 0.5], [1])


def test_pre_loss_logit_gradient_vanishes_at_target():
    assert np.all(pre_loss_grad_logit([1.0, 0.0], [1, 0]) == 0.0)


def test_msl_equal_inputs_give_entropy(rng):
    for _ in range(10):
        h = rng.normal(size=6)
        assert abs(msl_loss(h, h) - softmax_entropy(h)) <= 1e-12
    assert abs(msl_loss(np.zeros(2), np.zeros(2)) - math.log(2)) <= 1e-15


def test_msl_dim4_scalar_oracle(rng):
    ht, hs = rng.normal(size=4), rng.normal(size=4)
    pt = [math.exp(v) / sum(math.exp(u) for u in ht) for v in ht]
    ps = [math.exp(v) / sum(math.exp(u) for u in hs) for v in hs]
    assert msl_loss(ht, hs) == pytest.approx(-sum(a * math.log(b) for a, b in zip(pt, ps)), rel=1e-13)


def test_msl_batch_mean_and_mismatch(rng):
    ht, hs = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    rows = [msl_loss(ht[i], hs[i]) for i in range(3)]
    assert msl_loss(ht, hs) == pytest.approx(np.mean(rows), rel=1e-14)
    with pytest.raises(ValueError):
        msl_loss(np.zeros(3), np.zeros(4))


def test_msl_is_minimised_at_target(rng):
    ht = rng.normal(size=5)
    _, d_s = msl_loss_grad(ht, ht)
    assert np.allclose(d_s, 0.0, atol=1e-16)
    for _ in range(20):
        assert msl_loss(ht, ht + rng.normal(size=5)) >= msl_loss(ht, ht)


def test_mk_loss_example_and_homogeneity(rng):
    assert mk_loss(2.0, 0.5, LossConfig(alpha=0.01, beta=1.0)) == pytest.approx(0.52, abs=1e-15)
    for _ in range(50):
        a, b, c = rng.uniform(0.01, 3, size=3)
        lm, lp = rng.uniform(0, 5, size=2)
        # c is a power of two so the scaling is exact in binary floating point
        c = 2.0 ** int(rng.integers(-4, 5))
        assert mk_loss(lm, lp, LossConfig(c * a, c * b)) == c * mk_loss(lm, lp, LossConfig(a, b))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0, beta=0.0)
    with pytest.raises(ValueError):
        LossConfig(alpha=-1.0)
    assert LossConfig().alpha < LossConfig().beta
    assert LossConfig(alpha=0.5, beta=2.0).delta == 0.25


def test_feature_mse_baseline(rng):
    h = rng.normal(size=4)
    assert feature_mse_baseline(h, h) == 0.0
    assert feature_mse_baseline(np.array([1.0, 0.0]), np.zeros(2)) == 0.5
    a, b = rng.normal(size=6), rng.normal(size=6)
    assert feature_mse_baseline(a, b) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)) / 6, rel=1e-14)
    d_t, d_s = feature_mse_baseline_grad(a, b)
    assert np.allclose(d_s, 2 * (b - a) / 6) and np.allclose(d_t, -d_s)


def test_nd_gradients():
    assert check_nd() <= TOL


def test_pre_loss_gradient():
    assert check_pre_loss() <= TOL


def test_msl_gradients():
    assert check_msl_loss() <= TOL
