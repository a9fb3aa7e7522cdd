"""Finite-difference verification of every training objective.

Each check builds a small fresh model, evaluates one loss as a function of
all upstream parameters (encoder weights for the phase-1 losses, flow
weights for the phase-2 losses) and compares the tape gradient with central
differences, coordinate by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from . import rng as rngs
from .diffcore import GradientTape, Tensor, backward
from .ocnf import FlowConfig, FlowModel, inverse
from .representation import Encoder, EncoderConfig, forward

STEP = 1e-4
# Coordinates whose analytic and numeric gradients are both below this are
# compared on an absolute scale: a relative error of noise is meaningless.
FLOOR = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    coordinates: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_function(fn: Callable[[dict], Tensor], params: dict[str, np.ndarray], step: float = STEP) -> tuple[float, int]:
    """Max relative error between tape and central-difference gradients of ``fn``."""
    with GradientTape() as tape:
        leaves = {k: tape.watch(Tensor(v)) for k, v in params.items()}
        out = fn(leaves)
    g = backward(tape, out)
    worst, count = 0.0, 0
    for name, value in params.items():
        analytic = g[leaves[name]].ravel()
        numeric = np.empty_like(analytic)
        flat = value.ravel()
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + step
            hi = fn({**params, name: bumped.reshape(value.shape)}).item()
            bumped[i] = flat[i] - step
            lo = fn({**params, name: bumped.reshape(value.shape)}).item()
            numeric[i] = (hi - lo) / (2.0 * step)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
        count += flat.size
    return worst, count


def _phase1_case(seed: int):
    gen = rngs.stream(seed, "gradcheck", 1)
    cfg = EncoderConfig(5, (8, 8), 6, 2)
    params = Encoder.init(cfg, gen).params
    # Perturb the norm affine parameters away from (1, 0) so their gradients are generic.
    params = {k: v + 0.1 * gen.standard_normal(v.shape) for k, v in params.items()}
    x1 = gen.standard_normal((4, 5))
    x2 = x1 + 0.1 * gen.standard_normal((4, 5))
    proto = gen.standard_normal(6)
    return cfg, params, x1, x2, proto


def _phase2_case(seed: int):
    gen = rngs.stream(seed, "gradcheck", 2)
    cfg = FlowConfig(4, layers=2, hidden=(8, 8))
    params = FlowModel.init(cfg, gen, final_scale=0.3).params
    params = {k: v + 0.05 * gen.standard_normal(v.shape) for k, v in params.items()}
    r1 = gen.standard_normal((5, 4))
    r2 = r1 + 0.2 * gen.standard_normal((5, 4))
    return cfg, params, r1, r2


def phase1_checks(seed: int) -> dict[str, Callable]:
    cfg, params, x1, x2, proto = _phase1_case(seed)

    def enc(p, x):
        return forward(cfg, p, x)

    return {
        "cosine_loss": (lambda p: losses.cosine_loss(enc(p, x1[:1]), enc(p, x2[:1])), params),
        "loss_p": (lambda p: losses.loss_p(enc(p, x1), enc(p, x2)), params),
        "loss_pd": (lambda p: losses.loss_pd(enc(p, x1), enc(p, x2), proto, 1.0), params),
        "loss_pd_tau2": (lambda p: losses.loss_pd(enc(p, x1), enc(p, x2), proto, 2.0), params),
        "phase1_loss": (
            lambda p: losses.phase1_loss(enc(p, x1), enc(p, x2), proto, losses.Phase1Weights(0.1)),
            params,
        ),
    }


def phase2_checks(seed: int) -> dict[str, Callable]:
    cfg, params, r1, r2 = _phase2_case(seed)

    def flowed(p, r):
        return inverse(cfg, p, r)

    def mle(p):
        z, ld = flowed(p, r1)
        return losses.loss_mle(z, ld)

    def reg(p):
        return losses.loss_reg(flowed(p, r1)[0], flowed(p, r2)[0])

    def total(p):
        z, ld = flowed(p, r1)
        return losses.phase2_loss(z, flowed(p, r2)[0], ld, losses.Phase2Weights(0.01))

    return {"loss_mle": (mle, params), "loss_reg": (reg, params), "phase2_loss": (total, params)}


def run_suite(seeds=range(5), step: float = STEP) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for table in (phase1_checks(seed), phase2_checks(seed)):
            for name, (fn, params) in table.items():
                err, n = check_function(fn, params, step)
                results.append(CheckResult(name, int(seed), err, n))
    return results
