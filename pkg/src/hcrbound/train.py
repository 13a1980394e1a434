"""Minibatch AdamW training with cross-entropy, and (dithered) accuracy."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .nn import Model, Softmax, classify
from .tensor import DTYPE, RngStream, stream_for

log = logging.getLogger(__name__)

PURPOSE_SHUFFLE = 4
PURPOSE_DITHER = 2


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 6
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")


def cross_entropy_grad(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Loss ``-log softmax(logits)[label]`` and its gradient in the logits."""
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= label < logits.size:
        raise IndexError(f"label {label} out of range for {logits.size} classes")
    lse = logsumexp(logits)
    probs = np.exp(logits - lse)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(lse - logits[label]), grad


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over a batch, and the gradient of that mean."""
    lse = logsumexp(logits, axis=1, keepdims=True)
    rows = np.arange(len(labels))
    loss = float(np.mean(lse[:, 0] - logits[rows, labels]))
    grad = np.exp(logits - lse)
    grad[rows, labels] -= 1.0
    return loss, grad / len(labels)


def adamw_step(params, grads, moments, step: int, config: TrainConfig):
    """One AdamW update; returns new ``(params, moments)`` without mutating inputs.

    ``moments`` is a list of ``(m, v)`` pairs, one per parameter array.
    Weight decay is applied to the parameters directly, not via the gradient.
    """
    if step < 1:
        raise ValueError("step index starts at 1")
    if not len(params) == len(grads) == len(moments):
        raise ValueError("params, grads and moments must have equal length")
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr = config.learning_rate
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_moments = [], []
    for p, g, (m, v) in zip(params, grads, moments):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        new_params.append(p * (1.0 - lr * config.weight_decay) - lr * update)
        new_moments.append((m, v))
    return new_params, new_moments


def _logit_layers(model: Model):
    layers = model.layers
    if layers and isinstance(layers[-1], Softmax):
        layers = layers[:-1]
    return layers


def loss_and_grads(model: Model, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of a batch and gradients for every parameter array."""
    layers = _logit_layers(model)
    h, contexts = x, []
    for layer in layers:
        h, ctx = layer.forward(h)
        contexts.append(ctx)
    loss, dh = cross_entropy_batch(h, y)
    grads = []
    for layer, ctx in zip(reversed(layers), reversed(contexts)):
        dh, g = layer.backward(ctx, dh, param_grads=True)
        grads = g + grads
    return loss, grads


def parameters(model: Model) -> list[np.ndarray]:
    return [p for layer in model.layers for p in layer.params()]


def _assign(model: Model, values: list[np.ndarray]) -> None:
    it = iter(values)
    for layer in model.layers:
        count = len(layer.params())
        if count:
            layer.set_params([next(it) for _ in range(count)])


def train(model: Model, images: np.ndarray, labels: np.ndarray, config: TrainConfig) -> list[float]:
    """Train ``model`` in place; returns the mean training loss of each epoch."""
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError("need a nonempty dataset with one label per image")
    params = parameters(model)
    moments = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
    step, history = 0, []
    for epoch in range(config.epochs):
        rng = stream_for(config.seed, epoch, purpose=PURPOSE_SHUFFLE)
        # a generator seeded from our own stream keeps the permutation reproducible
        order = np.random.Generator(np.random.Philox(key=rng.raw(2))).permutation(len(images))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = loss_and_grads(model, images[idx], labels[idx])
            step += 1
            params, moments = adamw_step(params, grads, moments, step, config)
            _assign(model, params)
            total += loss * len(idx)
            seen += len(idx)
        history.append(total / seen)
        log.info("epoch %d/%d  loss %.5f", epoch + 1, config.epochs, history[-1])
    return history


def dither_noise(noise, seed: int, example: int, dim: int) -> np.ndarray:
    rng = stream_for(seed, example, purpose=PURPOSE_DITHER)
    return noise.sample(rng, 1, dim)[0]


def evaluate_accuracy(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    noise=None,
    seed: int = 0,
    batch_size: int = 1000,
    offset: int = 0,
) -> float:
    """Fraction classified correctly, optionally after adding noise to the features.

    Example ``i`` (counted from ``offset``) gets its own noise stream, so the
    result does not depend on batching.
    """
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    features = model.features
    correct = 0
    for start in range(0, len(images), batch_size):
        feats = features.forward_batch(images[start : start + batch_size])
        if noise is not None:
            dim = math.prod(feats.shape[1:])
            shift = np.stack(
                [dither_noise(noise, seed, offset + start + i, dim) for i in range(len(feats))]
            )
            feats = feats + shift.reshape(feats.shape)
        pred = classify(model, feats)
        correct += int(np.sum(pred == labels[start : start + batch_size]))
    return correct / len(images)
