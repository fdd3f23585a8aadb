"""Background-surface distributions.

A strategy transforms per-sample occupancies into the effective occupancies
used *only* inside the detached weight products (and the matching background
expectations); candidate terms always keep the true occupancy. The terminal
sample is exempt (its effective occupancy stays 1) so the stopping
distribution remains proper and ``sample_background`` always terminates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import ColorMetric
from .march import SampleBatch

KINDS = ("free_flight", "level_set", "color_dependent")


@dataclass
class BackgroundStrategy:
    kind: str = "free_flight"
    threshold: float = 0.5      # level_set
    c: float = 16.0             # color_dependent

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"strategy kind must be one of {KINDS}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("level-set threshold must lie in (0, 1)")
        if self.c < 0.0:
            raise ValueError("color weighting c must be >= 0")


def effective_alphas(strategy: BackgroundStrategy, batch: SampleBatch,
                     metric: ColorMetric | None = None) -> np.ndarray:
    """Per-sample effective occupancies (detached), batch layout (R, M)."""
    a = np.where(batch.valid, batch.alpha, 0.0)
    if strategy.kind == "free_flight":
        eff = a.copy()
    elif strategy.kind == "level_set":
        eff = np.where(a >= strategy.threshold, 1.0, 0.0)
    else:
        if metric is None:
            raise ValueError("color_dependent strategy needs a color metric")
        if batch.target is None:
            raise ValueError("batch.target must be set for color_dependent")
        l = metric.value(batch.color, batch.target[:, None, :])
        eff = a / (1.0 + strategy.c * l)
    eff[batch.terminal] = 1.0
    return np.where(batch.valid, eff, 0.0)


def background_probabilities(eff_alphas: np.ndarray, valid: np.ndarray):
    """Stopping probabilities prod_{t<j}(1-a'_t) * a'_j per sample."""
    one_minus = np.where(valid, 1.0 - eff_alphas, 1.0)
    w = np.cumprod(one_minus, axis=1)
    w = np.concatenate([np.ones((eff_alphas.shape[0], 1)), w[:, :-1]], axis=1)
    return np.where(valid, w * eff_alphas, 0.0)


def sample_background(strategy: BackgroundStrategy, batch: SampleBatch,
                      rng: np.random.Generator,
                      metric: ColorMetric | None = None,
                      n_draws: int = 1) -> np.ndarray:
    """Draw background sample indices per ray, shape (R, n_draws).

    Inverse-CDF over the free-flight stopping probabilities of the effective
    occupancies; the terminal sample guarantees the CDF reaches 1.
    """
    eff = effective_alphas(strategy, batch, metric=metric)
    probs = background_probabilities(eff, batch.valid)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = np.maximum(cdf[:, -1], 1.0)    # guard rounding at the tail
    u = rng.random((batch.n_rays, n_draws))
    idx = np.empty((batch.n_rays, n_draws), dtype=np.int64)
    for r in range(batch.n_rays):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right")
    last = batch.n_samples - 1
    return np.minimum(idx, last[:, None])
