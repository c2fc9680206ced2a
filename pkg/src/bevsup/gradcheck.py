"""Finite-difference checks of every loss against its closed-form gradient.

Each instance draws random fp64 inputs, takes the analytic gradient from the
loss itself and compares it with central differences of the same loss. The
perturbed copies are evaluated in one batched call with ``reduction="none"``.
"""
from __future__ import annotations

import math

import numpy as np

from .losses import GaussPrediction, LossWeights, gnll, layout_loss, orientation_loss, situation_loss
from .orientation import OrientationCodec
from .trainer import central_difference_batched, relative_error

LOSSES = ("gnll", "layout", "orientation", "situation")


def _gnll_case(rng, codec, weights, h):
    m, t = rng.normal(size=(2, 2))
    s = rng.uniform(-3, 3, size=2)
    r = gnll(GaussPrediction(m, s), t)

    def f(V):
        return gnll(GaussPrediction(V[:, :2], V[:, 2:]), np.broadcast_to(t, (len(V), 2)), "none").value
    return relative_error(np.concatenate([r.grad_mean, r.grad_log_var]),
                          central_difference_batched(f, np.concatenate([m, s]), h))


def _layout_case(rng, codec, weights, h):
    n = int(rng.integers(1, 9))
    m, t = rng.normal(size=(2, n, 2))
    s = rng.uniform(-3, 3, size=(n, 2))
    valid = rng.uniform(size=n) < 0.7
    valid[rng.integers(n)] = True
    r = layout_loss(GaussPrediction(m, s), t, valid)

    def f(V):
        k = len(V)
        pred = GaussPrediction(V[:, :2 * n].reshape(k, n, 2), V[:, 2 * n:].reshape(k, n, 2))
        return layout_loss(pred, t, valid, "none").value
    x = np.concatenate([m.ravel(), s.ravel()])
    return relative_error(np.concatenate([r.grad_mean.ravel(), r.grad_log_var.ravel()]),
                          central_difference_batched(f, x, h))


def _orientation_case(rng, codec, weights, h):
    z = rng.normal(size=codec.n_bins) * rng.uniform(0.1, 3)
    theta = rng.uniform(-math.pi, math.pi)
    r = orientation_loss(z, theta, codec)

    def f(V):
        return orientation_loss(V, np.full(len(V), theta), codec, "none").value
    return relative_error(r.grad_logits, central_difference_batched(f, z, h))


def _situation_case(rng, codec, weights, h):
    m, t = rng.normal(size=(2, 2))
    s = rng.uniform(-3, 3, size=2)
    z = rng.normal(size=codec.n_bins)
    theta = rng.uniform(-math.pi, math.pi)
    r = situation_loss(GaussPrediction(m, s), t, z, theta, codec, weights)

    def f(V):
        k = len(V)
        return situation_loss(GaussPrediction(V[:, :2], V[:, 2:4]), np.broadcast_to(t, (k, 2)), V[:, 4:],
                              np.full(k, theta), codec, weights, "none").value
    return relative_error(np.concatenate([r.grad_mean, r.grad_log_var, r.grad_logits]),
                          central_difference_batched(f, np.concatenate([m, s, z]), h))


_CASES = {"gnll": _gnll_case, "layout": _layout_case,
          "orientation": _orientation_case, "situation": _situation_case}


def loss_gradient_errors(n: int = 1000, seed: int = 0, codec: OrientationCodec | None = None,
                         weights: LossWeights | None = None, h: float = 1e-6) -> dict[str, float]:
    """Max relative gradient error per loss over ``n`` random fp64 instances each."""
    codec = codec or OrientationCodec()
    weights = weights or LossWeights()
    out = {}
    for k, name in enumerate(LOSSES):
        rng = np.random.default_rng([seed, k])
        out[name] = max(_CASES[name](rng, codec, weights, h) for _ in range(n))
    return out
