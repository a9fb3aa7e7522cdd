"""Training objectives for both phases.

Phase 1 (encoder): positive cosine loss between two views, prototype
distillation via a temperature-softmax KL, and their convex combination.
Phase 2 (flow): Gaussian negative log-likelihood with the change-of-variables
log-determinant, a cosine regulariser between flowed views, and their sum.

Every loss takes (batch, D) latents as tape tensors and returns a scalar
tensor. Additive constants of the Gaussian log-density are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    ContractError,
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    cosine_similarity,
    log_softmax,
    mul,
    square,
    sub,
    tensor,
    tmean,
    tsum,
)


@dataclass(frozen=True)
class Phase1Weights:
    alpha: float = 0.1
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class Phase2Weights:
    lam: float = 0.01

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


def _batch(x) -> Tensor:
    x = tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"expected a non-empty (batch, dim) tensor, got {x.shape}")
    return x


def cosine_loss(a, b) -> Tensor:
    """``1 - cos(a, b)`` for a single pair; rows are averaged for batches."""
    a, b = _batch(a), _batch(b)
    return tmean(sub(1.0, cosine_similarity(a, b)))


def loss_p(r, r_hat) -> Tensor:
    """Mean positive cosine loss between the two encoded views."""
    r, r_hat = _batch(r), _batch(r_hat)
    if r.shape != r_hat.shape:
        raise DimensionError(f"view batches differ in shape: {r.shape} vs {r_hat.shape}")
    return tmean(sub(1.0, cosine_similarity(r, r_hat)))


def kl_to_prototype(prototype, r, temperature: float = 1.0) -> Tensor:
    """Per-row KL(softmax(v/T) || softmax(r/T)), shape (batch,)."""
    r = _batch(r)
    v = np.asarray(prototype.data if isinstance(prototype, Tensor) else prototype, dtype=np.float64)
    if v.shape != (r.shape[1],):
        raise DimensionError(f"prototype has shape {v.shape}, latents have width {r.shape[1]}")
    log_pv = v / temperature - v.max() / temperature
    log_pv = log_pv - np.log(np.exp(log_pv).sum())
    pv = np.exp(log_pv)
    log_pr = log_softmax(mul(r, 1.0 / temperature), axis=-1)
    return tsum(mul(pv, sub(log_pv, log_pr)), axis=-1)


def loss_pd(r, r_hat, prototype, temperature: float = 1.0) -> Tensor:
    """Prototype distillation: mean over the batch of KL(v||r) + KL(v||r_hat)."""
    r, r_hat = _batch(r), _batch(r_hat)
    if r.shape != r_hat.shape:
        raise DimensionError(f"view batches differ in shape: {r.shape} vs {r_hat.shape}")
    per_row = add(kl_to_prototype(prototype, r, temperature), kl_to_prototype(prototype, r_hat, temperature))
    return tmean(per_row)


def phase1_loss(r, r_hat, prototype, weights: Phase1Weights = Phase1Weights()) -> Tensor:
    """``(1 - alpha) * L_pd + alpha * L_p``; a vanishing weight skips its term."""
    a = weights.alpha
    if a == 1.0:
        return loss_p(r, r_hat)
    if a == 0.0:
        return loss_pd(r, r_hat, prototype, weights.temperature)
    return add(
        mul(1.0 - a, loss_pd(r, r_hat, prototype, weights.temperature)),
        mul(a, loss_p(r, r_hat)),
    )


def loss_mle(z, logdet) -> Tensor:
    """Mean of ``|z|^2 / 2 - logdet`` over the batch."""
    z = _batch(z)
    raw = np.ravel(logdet.data if isinstance(logdet, Tensor) else np.asarray(logdet, dtype=np.float64))
    bad = np.flatnonzero(~np.isfinite(raw))
    if bad.size:
        raise NonFiniteError(f"non-finite log-determinant at sample {int(bad[0])}")
    logdet = tensor(logdet).reshape(-1)
    if logdet.shape[0] != z.shape[0]:
        raise DimensionError(f"{z.shape[0]} latents but {logdet.shape[0]} log-determinants")
    return tmean(sub(mul(0.5, tsum(square(z), axis=-1)), logdet))


def loss_reg(z, z_hat) -> Tensor:
    """Mean positive cosine loss between the flowed views."""
    z, z_hat = _batch(z), _batch(z_hat)
    if z.shape != z_hat.shape:
        raise DimensionError(f"batch sizes differ: {z.shape} vs {z_hat.shape}")
    return tmean(sub(1.0, cosine_similarity(z, z_hat)))


def phase2_loss(z, z_hat, logdet, weights: Phase2Weights = Phase2Weights()) -> Tensor:
    """``L_mle + lambda * L_reg``."""
    mle = loss_mle(z, logdet)
    if weights.lam == 0.0:
        return mle
    return add(mle, mul(weights.lam, loss_reg(z, z_hat)))


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64) / temperature
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


__all__ = [
    "Phase1Weights",
    "Phase2Weights",
    "cosine_loss",
    "loss_p",
    "loss_pd",
    "kl_to_prototype",
    "phase1_loss",
    "loss_mle",
    "loss_reg",
    "phase2_loss",
    "softmax",
]
