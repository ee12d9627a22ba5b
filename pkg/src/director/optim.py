"""First-order optimizers over :class:`~director.tensor.Tensor` parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Optimizer:
    def __init__(self, params, lr: float) -> None:
        self.params: list[Tensor] = list(params)
        self.state = OptimizerState(lr=lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, allow_missing: bool = False) -> None:
        """Apply one update, then clear gradients.

        Parameters without a gradient raise :class:`MissingGradError` unless
        ``allow_missing`` is set, in which case they (and their moments) are
        left untouched.
        """
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing and not allow_missing:
            names = [self.params[i].name or f"#{i}" for i in missing]
            raise MissingGradError(f"no gradient for parameters {names}")
        self.state.step += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.shape}")
            self._update(i, p)
        self.zero_grad()

    def _update(self, i: int, p: Tensor) -> None:  # pragma: no cover - abstract
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, i, p):
        p.data -= self.state.lr * p.grad


class Adam(Optimizer):
    """Adam with bias correction."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        super().__init__(params, lr)
        self.state.betas = tuple(betas)
        self.state.eps = eps
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]
        self._counts = [0] * len(self.params)

    def _update(self, i, p):
        b1, b2 = self.state.betas
        m, v = self.state.m[i], self.state.v[i]
        g = p.grad
        self._counts[i] += 1
        t = self._counts[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= self.state.lr * mhat / (np.sqrt(vhat) + self.state.eps)


class Adamax(Adam):
    """Infinity-norm variant of Adam; ``v`` holds the running max of ``|g|``."""

    def __init__(self, params, lr: float = 2e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
        super().__init__(params, lr, betas, eps)

    def _update(self, i, p):
        b1, b2 = self.state.betas
        m, u = self.state.m[i], self.state.v[i]
        g = p.grad
        self._counts[i] += 1
        t = self._counts[i]
        m *= b1
        m += (1 - b1) * g
        np.maximum(b2 * u, np.abs(g), out=u)
        p.data -= (self.state.lr / (1 - b1**t)) * m / (u + self.state.eps)


def make_optimizer(name: str, params, lr: float) -> Optimizer:
    kinds = {"sgd": SGD, "adam": Adam, "adamax": Adamax}
    try:
        return kinds[name.lower()](params, lr=lr)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(kinds)}") from None
