"""Plain SGD and Adadelta update rules.

The functional forms (:func:`sgd_step`, :func:`adadelta_step`) work on flat
arrays; :class:`SGD` and :class:`Adadelta` apply them in place to a list of
parameter tensors, keeping one state per tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check(params, grads):
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"parameter/gradient length mismatch: {params.shape} vs {grads.shape}")
    return params, grads


def sgd_step(params, grads, rate: float) -> np.ndarray:
    if rate <= 0:
        raise ValueError(f"learning rate must be positive, got {rate}")
    params, grads = _check(params, grads)
    return params - rate * grads


@dataclass
class AdadeltaState:
    """Running averages E[g^2] and E[dx^2] for one flattened tensor."""

    size: int
    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: np.ndarray = field(default=None)
    sq_update: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.sq_grad is None:
            self.sq_grad = np.zeros(self.size)
        if self.sq_update is None:
            self.sq_update = np.zeros(self.size)

    def copy(self) -> "AdadeltaState":
        return AdadeltaState(self.size, self.rho, self.eps, self.sq_grad.copy(), self.sq_update.copy())


def adadelta_step(state: AdadeltaState, params, grads):
    """One Adadelta update; returns ``(new_params, new_state, delta)``."""
    params, grads = _check(params, grads)
    if params.size != state.size:
        raise ValueError(f"state sized for {state.size} parameters, got {params.size}")
    shape = params.shape
    g = grads.reshape(-1)
    rho, eps = state.rho, state.eps
    sq_grad = rho * state.sq_grad + (1.0 - rho) * g * g
    delta = -np.sqrt((state.sq_update + eps) / (sq_grad + eps)) * g
    sq_update = rho * state.sq_update + (1.0 - rho) * delta * delta
    new_state = AdadeltaState(state.size, rho, eps, sq_grad, sq_update)
    return (params.reshape(-1) + delta).reshape(shape), new_state, delta.reshape(shape)


class SGD:
    def __init__(self, rate: float = 0.01):
        if rate <= 0:
            raise ValueError(f"learning rate must be positive, got {rate}")
        self.rate = rate

    def step(self, params, grads):
        for p, g in zip(params, grads, strict=True):
            p -= self.rate * g


class Adadelta:
    def __init__(self, rho: float = 0.95, eps: float = 1e-6):
        AdadeltaState(1, rho, eps)  # validates
        self.rho = rho
        self.eps = eps
        self.states: dict[int, AdadeltaState] = {}

    def step(self, params, grads):
        for i, (p, g) in enumerate(zip(params, grads, strict=True)):
            st = self.states.get(i)
            if st is None:
                st = self.states[i] = AdadeltaState(p.size, self.rho, self.eps)
            new, self.states[i], _ = adadelta_step(st, p, g)
            p[...] = new


def make_optimizer(name: str, **kwargs):
    name = name.strip().lower()
    if name == "adadelta":
        return Adadelta(rho=kwargs.get("rho", 0.95), eps=kwargs.get("eps", 1e-6))
    if name == "sgd":
        return SGD(rate=kwargs.get("rate", 0.01))
    raise ValueError(f"unknown optimizer {name!r}; choose 'adadelta' or 'sgd'")
