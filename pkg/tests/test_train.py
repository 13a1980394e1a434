import copy
import math

import numpy as np
import pytest

from hcrbound.hcr import GaussianIid
from hcrbound.nn import Affine, Model, ReLU, Softmax, classify
from hcrbound.train import (
    TrainConfig,
    adamw_step,
    cross_entropy_batch,
    cross_entropy_grad,
    evaluate_accuracy,
    loss_and_grads,
    parameters,
    train,
)


def small_model(rng, dims=(2, 8, 2)):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Affine(rng.normal(size=(a, b)) / math.sqrt(a), np.zeros(b)))
        if i < len(dims) - 2:
            layers.append(ReLU())
    layers.append(Softmax())
    return Model(layers, (dims[0],), feature_boundary=len(layers) - 2)


def separable(rng, n=200):
    x = rng.uniform(-1, 1, size=(n, 2))
    x = x[np.abs(x[:, 0] + x[:, 1]) > 0.2][:n]
    while len(x) < n:
        extra = rng.uniform(-1, 1, size=(n, 2))
        x = np.concatenate([x, extra[np.abs(extra[:, 0] + extra[:, 1]) > 0.2]])[:n]
    return x, (x[:, 0] + x[:, 1] > 0).astype(np.int64)


# ------------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy_grad(np.zeros(10), 3)
    assert loss == pytest.approx(math.log(10), rel=1e-15)
    expected = np.full(10, 0.1)
    expected[3] -= 1.0
    np.testing.assert_allclose(grad, expected, rtol=1e-14)


def test_cross_entropy_saturated_logits_are_stable():
    loss, grad = cross_entropy_grad(np.array([1000.0, 0.0]), 0)
    assert loss == 0.0 or loss < 1e-300
    assert np.all(np.isfinite(grad))
    loss, grad = cross_entropy_grad(np.array([1000.0, 0.0]), 1)
    assert loss == pytest.approx(1000.0, rel=1e-15)
    np.testing.assert_allclose(grad, [1.0, -1.0])


def test_cross_entropy_gradient_finite_difference(rng):
    logits, h = rng.normal(size=6), 1e-6
    _, grad = cross_entropy_grad(logits, 2)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        fd = (cross_entropy_grad(logits + e, 2)[0] - cross_entropy_grad(logits - e, 2)[0]) / (2 * h)
        assert fd == pytest.approx(grad[k], abs=1e-8)


def test_cross_entropy_batch_is_mean_of_rows(rng):
    logits, labels = rng.normal(size=(4, 5)), np.array([0, 4, 2, 2])
    loss, grad = cross_entropy_batch(logits, labels)
    rows = [cross_entropy_grad(l, y) for l, y in zip(logits, labels)]
    assert loss == pytest.approx(np.mean([r[0] for r in rows]), rel=1e-14)
    np.testing.assert_allclose(grad, np.stack([r[1] for r in rows]) / 4, rtol=1e-14)


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        cross_entropy_grad(np.zeros(3), 3)


# --------------------------------------------------------------------- AdamW

def test_adamw_single_step_hand_oracle():
    cfg = TrainConfig()
    p, g = np.array([1.0]), np.array([0.5])
    (new,), ((m, v),) = adamw_step([p], [g], [(np.zeros(1), np.zeros(1))], 1, cfg)
    # m = 0.05, v = 0.00025, bias corrections give m_hat = 0.5, v_hat = 0.25
    assert m[0] == pytest.approx(0.05, rel=1e-15)
    assert v[0] == pytest.approx(0.00025, rel=1e-15)
    assert new[0] == pytest.approx(1.0 * (1 - 1e-5) - 0.001 * 0.5 / (0.5 + 1e-8), rel=1e-15)
    assert p[0] == 1.0  # inputs untouched


def test_adamw_five_step_scalar_trace():
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.1)
    grads = [0.3, -0.2, 0.5, 0.1, -0.4]
    # independent scalar recursion
    x, m, v = 2.0, 0.0, 0.0
    expected = []
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9**t), v / (1 - 0.999**t)
        x = x - 0.01 * 0.1 * x - 0.01 * mh / (math.sqrt(vh) + 1e-8)
        expected.append(x)
    params, moments = [np.array([2.0])], [(np.zeros(1), np.zeros(1))]
    for t, g in enumerate(grads, 1):
        params, moments = adamw_step(params, [np.array([g])], moments, t, cfg)
        assert params[0][0] == pytest.approx(expected[t - 1], rel=1e-14)


def test_adamw_zero_gradient_only_decays():
    cfg = TrainConfig(weight_decay=0.0)
    p = [np.array([1.5, -2.0])]
    new, _ = adamw_step(p, [np.zeros(2)], [(np.zeros(2), np.zeros(2))], 1, cfg)
    np.testing.assert_array_equal(new[0], p[0])
    cfg = TrainConfig(weight_decay=0.5)
    new, _ = adamw_step(p, [np.zeros(2)], [(np.zeros(2), np.zeros(2))], 1, cfg)
    np.testing.assert_allclose(new[0], p[0] * (1 - 0.001 * 0.5), rtol=1e-15)


def test_adamw_errors():
    cfg = TrainConfig()
    z = (np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        adamw_step([np.zeros(2)], [np.zeros(2)], [z], 0, cfg)
    with pytest.raises(ValueError):
        adamw_step([np.zeros(2)], [np.zeros(3)], [z], 1, cfg)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


# ------------------------------------------------------------------ training

def test_parameter_gradients_match_finite_differences(rng):
    model = small_model(rng, (3, 5, 4))
    x, y = rng.normal(size=(6, 3)), rng.integers(0, 4, size=6)
    _, grads = loss_and_grads(model, x, y)
    h = 1e-6
    for p, g in zip(parameters(model), grads):
        for idx in list(np.ndindex(p.shape))[:6]:
            old = p[idx]
            p[idx] = old + h
            up = loss_and_grads(model, x, y)[0]
            p[idx] = old - h
            down = loss_and_grads(model, x, y)[0]
            p[idx] = old
            assert (up - down) / (2 * h) == pytest.approx(g[idx], abs=1e-7)


def test_loss_decreases_and_separable_set_is_learned(rng):
    x, y = separable(rng)
    model = small_model(rng, (2, 16, 2))
    history = train(model, x, y, TrainConfig(learning_rate=0.05, epochs=6, seed=3))
    assert history[2] < history[1] < history[0]
    assert evaluate_accuracy(model, x, y) == 1.0


def test_training_is_deterministic(rng):
    x, y = separable(rng, 64)
    init = small_model(rng)
    a = copy.deepcopy(init)
    train(init, x, y, TrainConfig(epochs=2, seed=9))
    train(a, x, y, TrainConfig(epochs=2, seed=9))
    for p, q in zip(parameters(init), parameters(a)):
        np.testing.assert_array_equal(p, q)


def test_accuracy_extremes(rng):
    model = Model([Affine(np.eye(2), np.zeros(2)), Softmax()], (2,), feature_boundary=1)
    x = np.array([[2.0, 0.0], [0.0, 3.0], [1.0, -1.0]])
    assert evaluate_accuracy(model, x, np.array([0, 1, 0])) == 1.0
    assert evaluate_accuracy(model, x, np.array([1, 0, 1])) == 0.0
    with pytest.raises(ValueError):
        evaluate_accuracy(model, x[:0], np.array([], dtype=int))


def test_dithered_accuracy_deterministic_and_not_better(rng):
    x, y = separable(rng, 400)
    model = small_model(rng, (2, 16, 2))
    train(model, x, y, TrainConfig(learning_rate=0.05, epochs=4, seed=1))
    noise = GaussianIid(1.0)
    clean = evaluate_accuracy(model, x, y)
    a = evaluate_accuracy(model, x, y, noise, seed=5)
    b = evaluate_accuracy(model, x, y, noise, seed=5, batch_size=7)
    assert a == b
    assert a <= clean + 0.02


def test_classify_ties_go_to_lowest_index():
    model = Model([Affine(np.eye(3), np.zeros(3)), Softmax()], (3,), feature_boundary=1)
    assert classify(model, np.array([1.0, 1.0, 0.0])) == 0
