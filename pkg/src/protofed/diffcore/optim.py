"""SGD and rectified Adam over named float64 parameter arrays.

Parameters and gradients are plain ``dict[str, np.ndarray]``; each step
returns a fresh dict and leaves the inputs untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import DimensionError

SGD = "sgd"
RADAM = "radam"


@dataclass
class OptimizerState:
    kind: str = SGD
    lr: float = 1e-3
    momentum: float = 0.0
    betas: tuple[float, float] = (0.94, 0.98)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (SGD, RADAM):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        b1, b2 = self.betas
        if not (0.0 <= self.momentum < 1.0 and 0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError("momentum and betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def _check(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    if params.keys() != grads.keys():
        raise DimensionError("parameter and gradient names differ")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise DimensionError(
                f"gradient for {name!r} has shape {np.shape(grads[name])}, expected {np.shape(p)}"
            )


def sgd_step(state: OptimizerState, params, grads) -> dict[str, np.ndarray]:
    """``p <- p - lr * (g + wd * p)``, with heavy-ball momentum when configured."""
    if state.kind != SGD:
        raise ValueError(f"sgd_step called with a {state.kind} state")
    _check(params, grads)
    state.step += 1
    out = {}
    for name, p in params.items():
        d = grads[name] + state.weight_decay * p if state.weight_decay else grads[name]
        if state.momentum:
            buf = state.buffers.setdefault(name, {})
            m = buf.get("momentum")
            m = d.copy() if m is None else state.momentum * m + d
            buf["momentum"] = m
            d = m
        out[name] = p - state.lr * d
    return out


def rectification(step: int, beta2: float) -> float | None:
    """Variance rectification factor r_t, or None while it is undefined.

    rho_inf = 2/(1-beta2) - 1 and rho_t = rho_inf - 2 t beta2^t / (1-beta2^t);
    the factor exists once rho_t > 4.
    """
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2**step
    rho_t = rho_inf - 2.0 * step * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return None
    return math.sqrt(
        (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
    )


def radam_step(state: OptimizerState, params, grads) -> dict[str, np.ndarray]:
    """One rectified-Adam update.

    Weight decay is folded into the gradient before the moment updates. While
    the rectification factor is undefined, the bias-corrected first moment is
    applied directly (momentum-SGD behaviour).
    """
    if state.kind != RADAM:
        raise ValueError(f"radam_step called with a {state.kind} state")
    _check(params, grads)
    beta1, beta2 = state.betas
    state.step += 1
    t = state.step
    r_t = rectification(t, beta2)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    out = {}
    for name, p in params.items():
        g = grads[name] + state.weight_decay * p if state.weight_decay else grads[name]
        buf = state.buffers.setdefault(name, {})
        m = buf.get("exp_avg", np.zeros_like(p))
        v = buf.get("exp_avg_sq", np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        buf["exp_avg"], buf["exp_avg_sq"] = m, v
        m_hat = m / bc1
        if r_t is None:
            out[name] = p - state.lr * m_hat
        else:
            denom = np.sqrt(v / bc2) + state.eps
            out[name] = p - state.lr * r_t * m_hat / denom
    return out


def step(state: OptimizerState, params, grads) -> dict[str, np.ndarray]:
    if state.kind == SGD:
        return sgd_step(state, params, grads)
    return radam_step(state, params, grads)
