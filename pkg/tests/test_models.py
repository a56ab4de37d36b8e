import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, relative_error, scalar_mixed_loss
from p4net.errors import ParameterError, ShapeError
from p4net.models import (DistillPair, LinearClassifier, Minibatch, batch_grad, evaluate, forward,
                          per_example_grads, predict, private_loss, proxy_loss, sample_minibatch)
from p4net.numerics import RandomSource, kl_divergence


def random_pair(rng, classes=3, dim=4, alpha=0.5, beta=0.5):
    mk = lambda: LinearClassifier(rng.normal(size=(classes, dim)), rng.normal(size=classes))
    return DistillPair(mk(), mk(), alpha, beta)


def random_batch(rng, n=5, classes=3, dim=4):
    return Minibatch(np.arange(n), rng.normal(size=(n, dim)), rng.integers(0, classes, n))


def test_flat_roundtrip_order():
    m = LinearClassifier(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([5.0, 6.0]))
    np.testing.assert_array_equal(m.flat(), [1, 2, 3, 4, 5, 6])
    np.testing.assert_array_equal(m.with_flat(m.flat() * 2).weights, m.weights * 2)
    with pytest.raises(ShapeError):
        m.with_flat(np.zeros(5))


def test_forward_examples():
    np.testing.assert_allclose(forward(LinearClassifier.zeros(4, 3), np.ones((2, 3))), 0.25)
    m = LinearClassifier(np.array([[50.0, 0.0], [-50.0, 0.0]]), np.zeros(2))
    x = np.array([[1.0, 3.0], [-0.5, 9.0], [2.0, -4.0]])
    np.testing.assert_array_equal(predict(m, x), [0, 1, 0])
    np.testing.assert_allclose(forward(m, x).sum(axis=1), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_proxy_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pair, batch = random_pair(rng, alpha=rng.uniform()), random_batch(rng)
    _, grads = proxy_loss(pair, batch)
    target = forward(pair.private, batch.features)
    fd = central_difference(lambda f: scalar_mixed_loss(pair.proxy.with_flat(f), batch.features,
                                                        batch.labels, pair.alpha, target), pair.proxy.flat())
    assert relative_error(grads.mean(axis=0), fd) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_private_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    pair, batch = random_pair(rng, beta=rng.uniform()), random_batch(rng)
    _, grad = private_loss(pair, batch)
    target = forward(pair.proxy, batch.features)
    fd = central_difference(lambda f: scalar_mixed_loss(pair.private.with_flat(f), batch.features,
                                                        batch.labels, pair.beta, target), pair.private.flat())
    assert relative_error(grad, fd) < 1e-5


def test_loss_boundaries():
    rng = np.random.default_rng(7)
    pair, batch = random_pair(rng), random_batch(rng)
    p_w, p_t = forward(pair.proxy, batch.features), forward(pair.private, batch.features)
    ce_w = np.mean([-np.log(p_w[i, y]) for i, y in enumerate(batch.labels)])
    ce_t = np.mean([-np.log(p_t[i, y]) for i, y in enumerate(batch.labels)])
    kl_wt = np.mean([kl_divergence(p_w[i], p_t[i]) for i in range(len(batch))])
    kl_tw = np.mean([kl_divergence(p_t[i], p_w[i]) for i in range(len(batch))])
    for alpha, beta, want_w, want_t in [(0, 0, ce_w, ce_t), (1, 1, kl_wt, kl_tw)]:
        pr = DistillPair(pair.private, pair.proxy, alpha, beta)
        assert proxy_loss(pr, batch)[0] == pytest.approx(want_w, rel=1e-12)
        assert private_loss(pr, batch)[0] == pytest.approx(want_t, rel=1e-12)


def test_distillation_holds_the_teacher_constant():
    rng = np.random.default_rng(8)
    pair, batch = random_pair(rng, alpha=1.0), random_batch(rng)
    before = pair.private.flat().copy()
    proxy_loss(pair, batch)
    np.testing.assert_array_equal(pair.private.flat(), before)


def test_per_example_grads_laws():
    rng = np.random.default_rng(9)
    m = LinearClassifier(rng.normal(size=(3, 4)), rng.normal(size=3))
    x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
    rows = per_example_grads(m, x, y)
    np.testing.assert_allclose(rows.mean(axis=0), batch_grad(m, x, y)[1], atol=1e-14)
    np.testing.assert_allclose(per_example_grads(m, x[:1], y[:1])[0], batch_grad(m, x[:1], y[:1])[1])
    xx, yy = np.vstack([x[:1], x[:1]]), np.array([y[0], y[0]])
    g2 = per_example_grads(m, xx, yy)
    np.testing.assert_array_equal(g2[0], g2[1])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.floats(0.05, 1.0))
def test_minibatch_size(n, ratio):
    x = np.zeros((n, 2))
    b = sample_minibatch(x, np.zeros(n, dtype=int), ratio, RandomSource(1))
    assert len(b) == min(n, int(np.ceil(ratio * n - 1e-9)))
    assert len(set(b.indices)) == len(b)


def test_pair_validation():
    m = LinearClassifier.zeros(2, 3)
    with pytest.raises(ParameterError):
        DistillPair(m, m.copy(), alpha=1.5)
    with pytest.raises(ShapeError):
        DistillPair(m, LinearClassifier.zeros(3, 3))
    with pytest.raises(ParameterError):
        sample_minibatch(np.zeros((3, 2)), np.zeros(3, dtype=int), 0.0, RandomSource(0))


def test_evaluate_examples():
    m = LinearClassifier(np.array([[1.0], [-1.0]]), np.zeros(2))
    x = np.array([[1.0], [2.0], [-1.0], [-3.0]])
    assert evaluate(m, x, [0, 0, 1, 1]) == 1.0
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, 4000)
    acc = evaluate(LinearClassifier.zeros(4, 1), np.zeros((4000, 1)), y)
    assert acc == pytest.approx(0.25, abs=0.03)
    assert acc == evaluate(LinearClassifier.zeros(4, 1), np.zeros((4000, 1)), y)
    with pytest.raises(ParameterError):
        evaluate(m, np.zeros((0, 1)), [])
