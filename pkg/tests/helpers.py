"""Shared test helpers: finite-difference gradient checks and model fixtures."""
from __future__ import annotations

import numpy as np

from director import tensor as T
from director.data import BOS, SEP


def analytic_grads(loss_fn, params):
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def numeric_grad(loss_fn, p, index, h=1e-4):
    old = p.data[index]
    with T.no_grad():
        p.data[index] = old + h
        up = loss_fn().item()
        p.data[index] = old - h
        down = loss_fn().item()
    p.data[index] = old
    return (up - down) / (2 * h)


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_gradients(loss_fn, params, h=1e-4, max_coords=None, rng=None):
    """Relative error between analytic and central-difference gradients.

    With ``max_coords`` only that many randomly chosen entries of each
    parameter are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_grads(loss_fn, params)
    ana, num = [], []
    for p, g in zip(params, grads):
        idx = list(np.ndindex(p.shape))
        if max_coords is not None and len(idx) > max_coords:
            idx = [idx[i] for i in rng.choice(len(idx), size=max_coords, replace=False)]
        for i in idx:
            ana.append(g[i])
            num.append(numeric_grad(loss_fn, p, i, h))
    return relative_error(np.array(ana), np.array(num))


def randomize(model, seed=0, scale=0.5):
    """Push every parameter away from its init so heads are far from uniform."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        p.data += rng.normal(0.0, scale, size=p.shape) * (0.3 if name.endswith(".g") else 1.0)
    return model


def random_tokens(rng, vocab_size, length):
    """BOS, a context, SEP and a response, drawn from non-reserved ids."""
    words = list(rng.integers(5, vocab_size, size=length - 2))
    half = (length - 2) // 2
    return np.array([BOS, *words[:half], SEP, *words[half:]])
