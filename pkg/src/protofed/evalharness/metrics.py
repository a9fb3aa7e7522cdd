"""AUROC and EER for one-class scores.

Scores follow the "higher = more anomalous" convention. The target class is
the normal one, so a perfect detector ranks every non-target above every
target and gets AUROC 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ScoredExample:
    sample_id: int
    is_target: bool
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"sample {self.sample_id}: non-finite score {self.score}")


def scored_examples(sample_ids, is_target, scores) -> list[ScoredExample]:
    return [ScoredExample(int(i), bool(t), float(s)) for i, t, s in zip(sample_ids, is_target, scores)]


def _split(scored: Sequence[ScoredExample]) -> tuple[np.ndarray, np.ndarray]:
    target = np.array([e.score for e in scored if e.is_target], dtype=np.float64)
    other = np.array([e.score for e in scored if not e.is_target], dtype=np.float64)
    if target.size == 0 or other.size == 0:
        raise ValueError("need at least one target and one non-target example")
    return target, other


def auroc_scores(target, nontarget) -> float:
    """P(nontarget score > target score) + 1/2 P(tie), via the rank-sum statistic."""
    target = np.asarray(target, dtype=np.float64).ravel()
    nontarget = np.asarray(nontarget, dtype=np.float64).ravel()
    if target.size == 0 or nontarget.size == 0:
        raise ValueError("need at least one target and one non-target example")
    ranks = rankdata(np.concatenate([target, nontarget]))
    n_t, n_o = target.size, nontarget.size
    u = ranks[n_t:].sum() - n_o * (n_o + 1) / 2.0
    return float(u / (n_t * n_o))


def auroc(scored: Sequence[ScoredExample]) -> float:
    return auroc_scores(*_split(scored))


def error_curve(target, nontarget) -> tuple[np.ndarray, np.ndarray]:
    """False-accept and false-reject rates at every distinct threshold.

    A sample is accepted as target when its score is <= the threshold. The
    first point is the threshold below every score (accept nothing).
    """
    target = np.asarray(target, dtype=np.float64).ravel()
    nontarget = np.asarray(nontarget, dtype=np.float64).ravel()
    thresholds = np.unique(np.concatenate([target, nontarget]))
    t_sorted, o_sorted = np.sort(target), np.sort(nontarget)
    accepted_t = np.searchsorted(t_sorted, thresholds, side="right")
    accepted_o = np.searchsorted(o_sorted, thresholds, side="right")
    far = np.concatenate([[0.0], accepted_o / o_sorted.size])
    frr = np.concatenate([[1.0], (t_sorted.size - accepted_t) / t_sorted.size])
    return far, frr


def eer_scores(target, nontarget) -> float:
    """Equal error rate; the FAR = FRR crossing is interpolated linearly
    between the two adjacent curve points that bracket it."""
    target = np.asarray(target, dtype=np.float64).ravel()
    nontarget = np.asarray(nontarget, dtype=np.float64).ravel()
    if target.size == 0 or nontarget.size == 0:
        raise ValueError("need at least one target and one non-target example")
    far, frr = error_curve(target, nontarget)
    gap = frr - far  # starts at 1, ends at <= 0, non-increasing
    i = int(np.flatnonzero(gap <= 0.0)[0])
    if gap[i] == 0.0:
        return float(far[i])
    w = gap[i - 1] / (gap[i - 1] - gap[i])
    return float(far[i - 1] + w * (far[i] - far[i - 1]))


def eer(scored: Sequence[ScoredExample]) -> float:
    return eer_scores(*_split(scored))
