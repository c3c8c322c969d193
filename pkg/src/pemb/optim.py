"""Adam over flat parameter vectors and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .core import LengthMismatch, NonFiniteGradient, NonFiniteValue, OutOfRange


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected Adam accumulator state; one instance per parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise OutOfRange(f"lr must be > 0, got {self.lr}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise OutOfRange("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise OutOfRange(f"eps must be > 0, got {self.eps}")
        if self.step < 0:
            raise OutOfRange("step must be >= 0")
        m = np.asarray(self.m, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if m.shape != v.shape or m.ndim != 1:
            raise LengthMismatch("moment vectors must be 1-D with equal length")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)

    @classmethod
    def init(cls, num_params: int, lr: float = 0.001, **kwargs) -> "AdamState":
        zeros = np.zeros(num_params, dtype=np.float64)
        return cls(m=zeros, v=zeros.copy(), step=0, lr=lr, **kwargs)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns the new state and new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise LengthMismatch(
            f"params {params.shape}, grads {grads.shape}, state {state.m.shape} must agree"
        )
    if not np.isfinite(grads).all():
        raise NonFiniteGradient("gradients contain non-finite entries")

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), new_params


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grads: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max over coordinates of |central difference - analytic| / max(1, |analytic|)."""
    if h <= 0:
        raise OutOfRange(f"h must be > 0, got {h}")
    params = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(analytic_grads, dtype=np.float64)
    if params.shape != analytic.shape or params.ndim != 1:
        raise LengthMismatch("params and analytic_grads must be 1-D with equal length")

    worst = 0.0
    probe = params.copy()
    for i in range(params.shape[0]):
        orig = probe[i]
        probe[i] = orig + h
        up = float(loss_fn(probe))
        probe[i] = orig - h
        down = float(loss_fn(probe))
        probe[i] = orig
        fd = (up - down) / (2.0 * h)
        if not np.isfinite(fd):
            raise NonFiniteValue(f"finite difference non-finite at coordinate {i}")
        err = abs(fd - analytic[i]) / max(1.0, abs(analytic[i]))
        if err > worst:
            worst = err
    return worst
