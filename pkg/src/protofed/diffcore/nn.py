"""Layer primitives built on the tape: affine maps, group norm, cosine."""

from __future__ import annotations

import logging

import numpy as np

from .tensor import DimensionError, Tensor, _emit, add, clamp_min, div, matmul, mul, sqrt, tensor, tsum

log = logging.getLogger(__name__)

NORM_EPS = 1e-12


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for a (batch, in) input."""
    return add(matmul(x, weight), bias)


def group_norm(x, groups: int, gamma=None, beta=None, eps: float = 1e-8) -> Tensor:
    """Per-sample group normalisation of a (batch, channels) tensor.

    Channels are split into ``groups`` contiguous blocks; each block is
    centred and scaled to unit (biased) variance, then the optional
    per-channel affine ``gamma * x + beta`` is applied.
    """
    x = tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"group_norm expects (batch, channels), got {x.shape}")
    n, c = x.shape
    if c % groups:
        raise DimensionError(f"{groups} groups do not divide {c} channels")
    xg = x.data.reshape(n, groups, c // groups)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def vjp(g):
        gg = g.reshape(n, groups, c // groups)
        dx = inv_std * (
            gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx.reshape(n, c),)

    out = _emit(xhat.reshape(n, c), (x,), vjp)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def row_norm(x, eps: float = NORM_EPS) -> Tensor:
    """Euclidean norm of each row, clamped below at ``eps``."""
    x = tensor(x)
    sq = tsum(mul(x, x), axis=-1)
    if (sq.data < eps * eps).any():
        log.warning("zero-norm vector in cosine computation; norm clamped at %g", eps)
    return clamp_min(sqrt(add(sq, eps * eps * 1e-6)), eps)


def cosine_similarity(a, b, eps: float = NORM_EPS) -> Tensor:
    """Row-wise cosine similarity of two (batch, dim) tensors."""
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shapes differ: {a.shape} vs {b.shape}")
    dot = tsum(mul(a, b), axis=-1)
    return div(dot, mul(row_norm(a, eps), row_norm(b, eps)))
