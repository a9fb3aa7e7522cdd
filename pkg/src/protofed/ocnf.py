"""Per-client one-class classifier: affine-coupling normalizing flow.

Direction convention: ``flow_inverse`` maps an encoder latent r to the base
space z and returns log|det dz/dr|. Each coupling layer keeps the masked
coordinates and maps the rest as ``z = (r - t) * exp(-s)``, so a layer whose
scale output is a constant c on m transformed coordinates contributes
``-c * m`` to the inverse log-determinant. ``flow_forward`` applies the
layers in reverse order with ``r = z * exp(s) + t``.

Before the couplings sits a per-coordinate affine normalisation
``(r - loc) * exp(-log_scale)`` (log-det ``-sum(log_scale)``). Training
initialises it from the client's latents, so an untrained flow scores like a
diagonal Gaussian fit and the couplings only need to refine it.

Anomaly score: ``|z|^2 / 2 - logdet`` (negative log-likelihood without the
constant). Higher means more anomalous.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from . import losses
from .diffcore import (
    DimensionError,
    GradientTape,
    NonFiniteError,
    OptimizerState,
    Tensor,
    add,
    backward,
    exp,
    linear,
    mul,
    neg,
    step,
    sub,
    tanh,
    tensor,
    tsum,
)
from .representation import AugmentPolicy, Encoder, LayoutError, ParamVector, augment, pack

log = logging.getLogger(__name__)

ACT_EPS = 1e-6


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    layers: int = 8
    hidden: tuple[int, ...] = (64, 64)
    clamp: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.dim < 2:
            raise ValueError("a coupling flow needs at least 2 dimensions")
        if self.layers < 1:
            raise ValueError("a flow needs at least one coupling layer")
        if self.clamp <= 0:
            raise ValueError("clamp must be positive")

    def mask(self, k: int) -> np.ndarray:
        """Alternating half masks; 1 marks coordinates the layer conditions on."""
        half = np.zeros(self.dim)
        half[: self.dim // 2] = 1.0
        return half if k % 2 == 0 else 1.0 - half

    def layout(self):
        shapes = [("act.loc", (self.dim,)), ("act.log_scale", (self.dim,))]
        for k in range(self.layers):
            widths = (self.dim, *self.hidden, 2 * self.dim)
            for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                shapes += [(f"L{k}.fc{j}.w", (a, b)), (f"L{k}.fc{j}.b", (b,))]
        return tuple(shapes)


@dataclass
class FlowModel:
    config: FlowConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: FlowConfig, rng: np.random.Generator, final_scale: float = 0.0) -> "FlowModel":
        """Hidden layers get He-style weights; the output layer of every subnet
        is scaled by ``final_scale`` (0 gives the identity flow)."""
        params = {}
        last = len(config.hidden)
        for name, shape in config.layout():
            if name.startswith("act."):
                params[name] = np.zeros(shape)
                continue
            is_last = name.split(".")[1] == f"fc{last}"
            if name.endswith(".w"):
                std = np.sqrt(1.0 / shape[0])
                w = rng.normal(0.0, std, size=shape)
                params[name] = w * final_scale if is_last else w
            else:
                params[name] = rng.normal(0.0, final_scale, size=shape) if is_last else np.zeros(shape)
        return cls(config, params)

    def flatten(self) -> ParamVector:
        return pack({name: self.params[name] for name, _ in self.config.layout()})

    @classmethod
    def unflatten(cls, pv: ParamVector, config: FlowConfig) -> "FlowModel":
        if tuple(pv.layout) != config.layout():
            raise LayoutError("parameter layout does not match the flow configuration")
        return cls(config, pv.arrays())


def _coupling_st(config: FlowConfig, params: Mapping, k: int, cond: Tensor):
    h = cond
    n_hidden = len(config.hidden)
    for j in range(n_hidden):
        h = tanh(linear(h, params[f"L{k}.fc{j}.w"], params[f"L{k}.fc{j}.b"]))
    out = linear(h, params[f"L{k}.fc{n_hidden}.w"], params[f"L{k}.fc{n_hidden}.b"])
    d = config.dim
    inv_mask = 1.0 - config.mask(k)
    s = mul(mul(config.clamp, tanh(mul(out[:, :d], 1.0 / config.clamp))), inv_mask)
    t = mul(out[:, d:], inv_mask)
    return s, t


def inverse(config: FlowConfig, params: Mapping, r) -> tuple[Tensor, Tensor]:
    """Differentiable t^-1: (batch, D) latents -> (z, per-sample logdet)."""
    x = _as_batch(r, config.dim)
    log_scale = tensor(params["act.log_scale"])
    x = mul(sub(x, params["act.loc"]), exp(neg(log_scale)))
    logdet = mul(neg(tsum(log_scale)), np.ones(x.shape[0]))
    for k in range(config.layers):
        try:
            m = config.mask(k)
            cond = mul(x, m)
            s, t = _coupling_st(config, params, k, cond)
            x = add(cond, mul(mul(sub(x, t), exp(neg(s))), 1.0 - m))
            logdet = sub(logdet, tsum(s, axis=-1))
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite value in coupling layer {k}") from exc
    return x, logdet


def forward(config: FlowConfig, params: Mapping, z) -> Tensor:
    """Differentiable t: base samples -> latent space."""
    x = _as_batch(z, config.dim)
    for k in reversed(range(config.layers)):
        try:
            m = config.mask(k)
            cond = mul(x, m)
            s, t = _coupling_st(config, params, k, cond)
            x = add(cond, mul(add(mul(x, exp(s)), t), 1.0 - m))
        except NonFiniteError as exc:
            raise NonFiniteError(f"non-finite value in coupling layer {k}") from exc
    return add(mul(x, exp(params["act.log_scale"])), params["act.loc"])


def _as_batch(x, dim: int) -> Tensor:
    x = tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"flow expects width {dim}, got {x.shape}")
    return x


def flow_inverse(model: FlowModel, r) -> tuple[np.ndarray, np.ndarray]:
    """t^-1 on a vector or batch; returns plain arrays (z, logdet)."""
    z, ld = inverse(model.config, model.params, r)
    if np.ndim(r) == 1:
        return z.data[0].copy(), float(ld.data[0])
    return z.numpy(), ld.numpy()


def flow_forward(model: FlowModel, z) -> np.ndarray:
    r = forward(model.config, model.params, z)
    return r.data[0].copy() if np.ndim(z) == 1 else r.numpy()


def nll(model: FlowModel, r) -> np.ndarray:
    """``|z|^2 / 2 - logdet`` per row of r."""
    z, ld = flow_inverse(model, np.atleast_2d(r))
    out = 0.5 * np.sum(z * z, axis=-1) - ld
    if not np.isfinite(out).all():
        raise OverflowError("anomaly score overflowed")
    return out


def log_density(model: FlowModel, r) -> np.ndarray:
    """Full log p_R(r) including the Gaussian normaliser."""
    d = model.config.dim
    return -nll(model, r) - 0.5 * d * np.log(2.0 * np.pi)


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class OCNFTrainConfig:
    epochs: int = 5
    lr: float = 5e-3
    batch_size: int = 8
    optimizer: str = "sgd"
    momentum: float = 0.0
    betas: tuple[float, float] = (0.94, 0.98)
    weight_decay: float = 0.0
    lam: float = 0.01
    data_init: bool = True
    latent_noise: float = 0.5
    max_grad_norm: float | None = 10.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.latent_noise < 0:
            raise ValueError("latent_noise must be non-negative")
        losses.Phase2Weights(self.lam)


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    initial_params: dict | None = None


def phase2_batch_loss(config: FlowConfig, params: Mapping, r, r_hat, weights: losses.Phase2Weights) -> Tensor:
    z, ld = inverse(config, params, r)
    if weights.lam == 0.0:
        return losses.loss_mle(z, ld)
    z_hat, _ = inverse(config, params, r_hat)
    return losses.phase2_loss(z, z_hat, ld, weights)


def train_ocnf(
    encoder: Encoder,
    shard: np.ndarray,
    flow_config: FlowConfig,
    train_config: OCNFTrainConfig,
    rng: np.random.Generator,
    policy: AugmentPolicy = AugmentPolicy(),
) -> tuple[FlowModel, TrainLog]:
    """Fit a flow to the frozen encoder's latents of one client's shard.

    Each epoch draws two fresh views of every sample, encodes them with the
    frozen encoder and runs minibatch updates on ``L_mle + lambda * L_reg``.
    ``TrainLog.initial_loss`` is the objective before any update, evaluated
    on the first epoch's views; ``epoch_losses`` holds the mean batch loss of
    each epoch. ``TrainLog.initial_params`` is the flow after the
    data-dependent normalisation init and before any gradient step.

    With ``latent_noise > 0`` both views get Gaussian noise of that many
    per-coordinate standard deviations before each epoch's updates.
    """
    shard = np.asarray(shard, dtype=np.float64)
    if shard.ndim != 2 or shard.shape[0] == 0:
        raise ValueError("train_ocnf needs a non-empty (n, features) shard")
    model = FlowModel.init(flow_config, rng)
    weights = losses.Phase2Weights(train_config.lam)
    opt = OptimizerState(
        kind=train_config.optimizer,
        lr=train_config.lr,
        momentum=train_config.momentum,
        betas=tuple(train_config.betas),
        weight_decay=train_config.weight_decay,
    )
    tlog = TrainLog()
    params = model.params
    n = shard.shape[0]
    spread = None
    for epoch in range(train_config.epochs):
        r = encoder(augment(shard, policy, rng))
        r_hat = encoder(augment(shard, policy, rng))
        if spread is None:
            spread = r.std(axis=0) + ACT_EPS
            if train_config.data_init:
                params = dict(params)
                params["act.loc"] = r.mean(axis=0)
                params["act.log_scale"] = np.log(spread)
            tlog.initial_params = dict(params)
        if train_config.latent_noise > 0:
            # Latents of a low-dimensional input fill a thin manifold; noise keeps the
            # flow from collapsing onto directions that carry no class information.
            r = r + rng.normal(0.0, 1.0, r.shape) * (train_config.latent_noise * spread)
            r_hat = r_hat + rng.normal(0.0, 1.0, r_hat.shape) * (train_config.latent_noise * spread)
        if epoch == 0:
            tlog.initial_loss = phase2_batch_loss(flow_config, params, r, r_hat, weights).item()
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            with GradientTape() as tape:
                leaves = {k: tape.watch(Tensor(v)) for k, v in params.items()}
                loss = phase2_batch_loss(flow_config, leaves, r[idx], r_hat[idx], weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"non-finite phase-2 loss in epoch {epoch}")
            g = backward(tape, loss)
            grads = {k: g[leaves[k]] for k in params}
            if train_config.max_grad_norm is not None:
                grads = clip_grad_norm(grads, train_config.max_grad_norm)
            params = step(opt, params, grads)
            batch_losses.append(value)
        tlog.epoch_losses.append(float(np.mean(batch_losses)))
    model.params = params
    return model, tlog


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def score(model: FlowModel, encoder: Encoder, samples) -> np.ndarray:
    """Anomaly score of raw samples: encode once (no augmentation), then NLL."""
    return nll(model, encoder(np.atleast_2d(samples)))


# -- density baselines ------------------------------------------------------

COV_EPS = 1e-6


class GaussianDensity:
    """Single diagonal Gaussian fitted to training latents."""

    def __init__(self, train):
        train = np.asarray(train, dtype=np.float64)
        if train.ndim != 2 or train.shape[0] < 2:
            raise ValueError("need at least 2 training latents")
        self.mean = train.mean(axis=0)
        var = train.var(axis=0)
        if (var < COV_EPS).any():
            log.warning("degenerate variance in %d dims; regularised with %g", int((var < COV_EPS).sum()), COV_EPS)
        self.var = var + COV_EPS

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return 0.5 * np.sum((x - self.mean) ** 2 / self.var + np.log(2.0 * np.pi * self.var), axis=-1)


class KernelDensity:
    """Isotropic Gaussian KDE; the default bandwidth follows Scott's rule."""

    def __init__(self, train, bandwidth: float | None = None):
        train = np.asarray(train, dtype=np.float64)
        if train.ndim != 2 or train.shape[0] < 1:
            raise ValueError("need training latents")
        n, d = train.shape
        if bandwidth is None:
            spread = float(train.std(axis=0).mean()) if n > 1 else 1.0
            bandwidth = max(spread, COV_EPS) * n ** (-1.0 / (d + 4))
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.train = train
        self.bandwidth = float(bandwidth)

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        n, d = self.train.shape
        h2 = self.bandwidth**2
        sq = np.concatenate(
            [
                np.sum((chunk[:, None, :] - self.train[None, :, :]) ** 2, axis=-1)
                for chunk in np.array_split(x, max(1, len(x) // 128))
            ]
        )
        return -logsumexp(-sq / (2.0 * h2), axis=1) + np.log(n) + 0.5 * d * np.log(2.0 * np.pi * h2)


def gde_score(train_latents, test_latent):
    out = GaussianDensity(train_latents).score(test_latent)
    return float(out[0]) if np.ndim(test_latent) == 1 else out


def kde_score(train_latents, test_latent, bandwidth: float):
    out = KernelDensity(train_latents, bandwidth).score(test_latent)
    return float(out[0]) if np.ndim(test_latent) == 1 else out
