from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfouda import autodiff as ad


def central_difference(f, x: np.ndarray, h: float = 1e-6, entries=None) -> np.ndarray:
    """Numerical gradient of f() w.r.t. x (modified in place); only ``entries`` if given."""
    g = np.zeros_like(x)
    for i in (np.ndindex(x.shape) if entries is None else entries):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-8)


def test_primitive_values():
    assert np.allclose(ad.softmax_rows(np.zeros((1, 2))).value, [[0.5, 0.5]])
    assert np.array_equal(ad.relu(np.array([-1.0, 2.0])).value, [0.0, 2.0])
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(ad.affine(x, np.eye(3), np.zeros(3)).value, x)
    n = ad.l2_normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]])).value
    assert np.allclose(n, [[0.6, 0.8], [0.0, 0.0]])
    assert np.array_equal(ad.gather_rows(x, [1, 1, 0]).value, x[[1, 1, 0]])


def test_shape_errors():
    with pytest.raises(ad.ShapeMismatch):
        ad.add(np.zeros((2, 3)), np.zeros((4, 3)))
    with pytest.raises(ad.ShapeMismatch):
        ad.affine(np.zeros((2, 3)), np.zeros((4, 5)))
    with pytest.raises(ad.NotScalar):
        ad.backward(ad.parameter(np.zeros(3)) * 2.0)


def test_dropout_contract(rng):
    x = ad.Tensor(rng.normal(size=(4, 5)))
    assert ad.dropout(x, 0.5, rng, enabled=False) is x
    assert np.array_equal(ad.dropout(x, 0.0, rng).value, x.value)
    with pytest.raises(ad.InvalidProbability):
        ad.dropout(x, 1.0, rng)


def test_dropout_law_of_large_numbers():
    x = np.full(1_000_000, 2.0)
    out = ad.dropout(x, 0.5, np.random.default_rng(0)).value
    assert 0.497 <= np.mean(out != 0) <= 0.503
    assert abs(out.mean() - 2.0) < 0.02


def test_stop_gradient_cases(rng):
    x = ad.parameter(rng.normal(size=7))
    loss = ad.mean(ad.mul(ad.stop_gradient(x), x))
    (g,) = ad.grad(loss, [x])
    # only the live factor contributes; x/N up to the rounding of 1/N
    np.testing.assert_array_max_ulp(g, x.value / 7, maxulp=1)
    (g,) = ad.grad(ad.mean(ad.stop_gradient(x)), [x])
    assert np.array_equal(g, np.zeros(7))
    assert np.array_equal(ad.stop_gradient(x).value, x.value)


def test_sum_gradient_and_disconnected_parameter(rng):
    x, y = ad.parameter(rng.normal(size=(3, 2))), ad.parameter(rng.normal(size=4))
    gx, gy = ad.grad(ad.tsum(x), [x, y])
    assert np.array_equal(gx, np.ones((3, 2))) and np.array_equal(gy, np.zeros(4))


def test_grad_does_not_touch_grad_buffers(rng):
    x = ad.parameter(rng.normal(size=3))
    ad.grad(ad.tsum(x), [x])
    assert x.grad is None
    ad.backward(ad.tsum(x))
    ad.backward(ad.tsum(x))
    assert np.array_equal(x.grad, np.full(3, 2.0))


def test_classifier_chain_matches_finite_differences(rng):
    x = rng.normal(size=(3, 4))
    W1, b1 = ad.parameter(rng.normal(size=(4, 5))), ad.parameter(rng.normal(size=5))
    W2, b2 = ad.parameter(rng.normal(size=(5, 3))), ad.parameter(rng.normal(size=3))
    targets = np.array([0, 2, 1])

    def loss():
        h = ad.relu(ad.affine(x, W1, b1))
        return ad.cross_entropy(ad.affine(h, W2, b2), targets)

    params = [W1, b1, W2, b2]
    grads = ad.grad(loss(), params)
    for p, g in zip(params, grads):
        assert rel_err(g, central_difference(lambda: loss().item(), p.value)) < 1e-4


def test_softmax_log_softmax_and_normalize_gradients(rng):
    x = ad.parameter(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    for fn in (ad.softmax_rows, ad.log_softmax_rows, ad.l2_normalize_rows, ad.exp):
        loss = lambda: ad.tsum(ad.mul(fn(x), w))  # noqa: E731
        (g,) = ad.grad(loss(), [x])
        assert rel_err(g, central_difference(lambda: loss().item(), x.value)) < 1e-5, fn.__name__


def test_division_log_and_gather_gradients(rng):
    a = ad.parameter(rng.uniform(1, 2, (3, 2)))
    b = ad.parameter(rng.uniform(1, 2, 2))

    def loss():
        r = ad.div(ad.log(a), b)
        return ad.mean(ad.gather_rows(r, [0, 2, 2]))

    ga, gb = ad.grad(loss(), [a, b])
    assert rel_err(ga, central_difference(lambda: loss().item(), a.value)) < 1e-5
    assert rel_err(gb, central_difference(lambda: loss().item(), b.value)) < 1e-5


def test_batch_norm_gradients_and_running_stats(rng):
    x = ad.parameter(rng.normal(size=(6, 3)))
    gamma, beta = ad.parameter(rng.normal(size=3)), ad.parameter(rng.normal(size=3))
    w = rng.normal(size=(6, 3))

    def loss():
        return ad.tsum(ad.mul(ad.batch_norm(x, gamma, beta), w))

    for p, g in zip([x, gamma, beta], ad.grad(loss(), [x, gamma, beta])):
        assert rel_err(g, central_difference(lambda: loss().item(), p.value)) < 1e-5
    stats = ad.BatchNormStats.fresh(3)
    ad.batch_norm(x, gamma, beta, stats)
    assert np.allclose(stats.running_mean, 0.1 * x.value.mean(axis=0))
    out = ad.batch_norm(x, gamma, beta, stats, training=False).value
    assert np.allclose(out, (x.value - stats.running_mean) / np.sqrt(stats.running_var + 1e-5)
                       * gamma.value + beta.value)


def test_adam_zero_gradient_keeps_parameters():
    p = ad.parameter([1.0, -2.0])
    ad.adam_step([p], [np.zeros(2)], ad.OptimizerState())
    assert np.array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_is_learning_rate():
    for g in (1e-3, 0.5, 40.0):
        p = ad.parameter([0.0])
        ad.adam_step([p], [np.array([g])], ad.OptimizerState(lr=1e-3))
        assert abs(abs(p.value[0]) - 1e-3) < 1e-5


def test_adam_constant_gradient_decreases_monotonically():
    p = ad.parameter(5.0)
    opt = ad.Adam([p], lr=0.01)
    seen = [p.item()]
    for _ in range(100):
        opt.step([np.array(2.0)])
        seen.append(p.item())
    assert np.all(np.diff(seen) < 0)


def test_adam_rejects_non_finite():
    p = ad.parameter([0.0])
    with pytest.raises(ad.NonFiniteGradient):
        ad.adam_step([p], [np.array([np.nan])], ad.OptimizerState())


@settings(max_examples=30, deadline=None)
@given(shape_a=st.sampled_from([(3, 4), (1, 4), (4,), (3, 1)]), seed=st.integers(0, 1000))
def test_broadcast_gradients(shape_a, seed):
    r = np.random.default_rng(seed)
    a = ad.parameter(r.normal(size=shape_a))
    b = ad.parameter(r.normal(size=(3, 4)))
    w = r.normal(size=(3, 4))

    def loss():
        return ad.tsum(ad.mul(ad.sub(ad.mul(a, b), ad.add(a, 1.0)), w))

    ga, gb = ad.grad(loss(), [a, b])
    assert ga.shape == a.shape
    assert rel_err(ga, central_difference(lambda: loss().item(), a.value)) < 1e-5
    assert rel_err(gb, central_difference(lambda: loss().item(), b.value)) < 1e-5
