"""Temperature learning, softmax-score pruning, and joint threshold selection.

Temperatures minimize validation negative log-likelihood with a deterministic
1-d search (log-spaced grid, then golden-section refinement), so repeated runs
give identical results.  Pruning always evaluates the softmax confidence at
temperature 1: it models raw detector behavior and stays independent of the
temperature toggle.  Joint thresholds come from in-distribution validation
quantiles only; no OOD data is consulted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .interchange import JointThresholds, ThresholdPolicy
from .scoring import ScoreTable

DEFAULT_PRUNE_THRESHOLD = 0.2
DEFAULT_SOFT_QUANTILE = 0.05
DEFAULT_GMM_QUANTILE = 0.95

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ModeConfig:
    """One evaluation mode: the pruning toggle bound to a temperature pair."""

    name: str
    prune: bool
    t_model: float
    t_gmm: float


@dataclass(frozen=True)
class ModeMatrix:
    """The four mode configurations: raw, pruned, temp, pruned_temp."""

    raw: ModeConfig
    pruned: ModeConfig
    temp: ModeConfig
    pruned_temp: ModeConfig

    def __getitem__(self, name: str) -> ModeConfig:
        try:
            return getattr(self, name)
        except AttributeError:
            raise KeyError(f"unknown mode {name!r}") from None

    def __iter__(self):
        return iter((self.raw, self.pruned, self.temp, self.pruned_temp))


def build_mode_matrix(
    t_model: float = 1.0,
    t_gmm: float = 1.0,
    prune_threshold: float = DEFAULT_PRUNE_THRESHOLD,
) -> ModeMatrix:
    """Bind learned temperatures into the four evaluation modes."""
    del prune_threshold  # carried by the profile; modes only toggle its use
    return ModeMatrix(
        raw=ModeConfig("raw", False, 1.0, 1.0),
        pruned=ModeConfig("pruned", True, 1.0, 1.0),
        temp=ModeConfig("temp", False, t_model, t_gmm),
        pruned_temp=ModeConfig("pruned_temp", True, t_model, t_gmm),
    )


def prune_mask(raw_conf, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> np.ndarray:
    """True for detections kept by pruning: raw softmax confidence >= threshold."""
    return np.asarray(raw_conf, dtype=np.float64) >= threshold


def prune(items: Sequence, raw_conf, threshold: float = DEFAULT_PRUNE_THRESHOLD) -> list:
    """Discard items whose raw confidence falls strictly under the threshold."""
    mask = prune_mask(raw_conf, threshold)
    if len(items) != mask.shape[0]:
        raise ValueError("items and raw_conf lengths disagree")
    return [item for item, keep in zip(items, mask) if keep]


def nll_for_temperature(vectors: np.ndarray, labels: np.ndarray, t: float) -> float:
    """Mean negative log-likelihood of the tempered softmax at the true labels."""
    z = vectors / t
    m = z.max(axis=1, keepdims=True)
    log_norm = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    picked = z[np.arange(z.shape[0]), labels]
    return float((log_norm - picked).mean())


def learn_temperature(
    vectors,
    labels,
    t_min: float = 1e-2,
    t_max: float = 1e2,
    grid_size: int = 200,
    refine_tol: float = 1e-4,
) -> float:
    """Scalar temperature minimizing validation NLL.

    Evaluates a log-spaced grid, then refines inside the bracketing interval
    with golden-section search to ``refine_tol``.  Returns whichever of the
    refined point and the best grid point has lower NLL, so the result is
    never worse than the exhaustive grid.
    """
    v = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ConfigurationError("learn_temperature needs a non-empty (n, C) array")
    if y.shape != (v.shape[0],) or y.min() < 0 or y.max() >= v.shape[1]:
        raise ValueError("labels must index columns of the score vectors")

    grid = np.geomspace(t_min, t_max, grid_size)
    nlls = np.array([nll_for_temperature(v, y, t) for t in grid])
    best = int(np.argmin(nlls))

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, grid_size - 1)]
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = nll_for_temperature(v, y, c)
    fd = nll_for_temperature(v, y, d)
    while b - a > refine_tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = nll_for_temperature(v, y, c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = nll_for_temperature(v, y, d)
    refined = (a + b) / 2.0
    if nll_for_temperature(v, y, refined) <= nlls[best]:
        return float(refined)
    return float(grid[best])


def select_joint_thresholds(
    scores: ScoreTable,
    soft_quantile: float = DEFAULT_SOFT_QUANTILE,
    gmm_quantile: float = DEFAULT_GMM_QUANTILE,
) -> JointThresholds:
    """Thresholds from ID-only validation quantiles.

    Quantiles use the inverted-CDF convention (smallest observed value whose
    empirical CDF reaches the requested level), which makes two guarantees
    exact: by the union bound at least ``1 - soft_quantile -
    (1 - gmm_quantile)`` of the validation detections satisfy both gate
    conditions, and every accepted validation detection has a fused rank
    score of at least ``min(soft_quantile, 1 - gmm_quantile)``.
    """
    if len(scores) == 0:
        raise ConfigurationError("select_joint_thresholds needs non-empty validation scores")
    if not (0.0 < soft_quantile < 1.0 and 0.0 < gmm_quantile < 1.0):
        raise ConfigurationError("quantiles must lie strictly inside (0, 1)")
    tau_soft = float(np.quantile(scores.softmax_conf, soft_quantile,
                                 method="inverted_cdf"))
    tau_gmm = float(np.quantile(scores.gmm_posterior_entropy, gmm_quantile,
                                method="inverted_cdf"))
    return JointThresholds(
        tau_soft=tau_soft,
        tau_gmm=tau_gmm,
        policy=ThresholdPolicy(soft_quantile=soft_quantile, gmm_quantile=gmm_quantile),
    )
