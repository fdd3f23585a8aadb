"""Training losses with hand-written forward and backward passes.

Three losses operate on marched sample batches:

* ``radiance_field_loss`` - the per-sample blended loss: each sample is a
  surface candidate scored independently against the ray's target color,
  weighted by the free-flight probability of reaching it. Its analytic
  gradient w.r.t. each occupancy is w_i * (l_i - E[l behind i]), i.e. a
  candidate that explains the pixel better than its expected background gets
  pushed up. This equals the gradient of the fully-differentiated product
  form; the `oracle` module verifies the equivalence by enumeration.
* ``nerf_loss`` - the image-space baseline: alpha-composite colors first,
  then compare.
* ``relaxed_loss`` - volumetric relaxation: per sample, compare against a
  transmittance-adjusted goal color, blending with the (detached) expected
  color behind the sample only where blending actually helps. Weights are
  detached.

Gradients are returned as per-sample arrays matching the batch layout; the
caller routes them through the field scatter ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .march import SampleBatch

GOAL_TRANSMITTANCE_FLOOR = 1e-6


@dataclass
class ColorMetric:
    """Per-sample color difference, mean over channels. kind: l2 | l1."""

    kind: str = "l2"

    def __post_init__(self):
        if self.kind not in ("l2", "l1"):
            raise ValueError(f"unknown metric kind {self.kind!r}")

    def value(self, a, b) -> np.ndarray:
        d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        if self.kind == "l2":
            return np.mean(d * d, axis=-1)
        return np.mean(np.abs(d), axis=-1)

    def grad_a(self, a, b) -> np.ndarray:
        d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        n = d.shape[-1]
        if self.kind == "l2":
            return 2.0 * d / n
        return np.sign(d) / n       # subgradient 0 at the kink


def color_loss(metric: ColorMetric, a, b):
    """(loss, d loss/d a) for a single color pair or a batch of pairs."""
    return metric.value(a, b), metric.grad_a(a, b)


@dataclass
class LossReport:
    total: float
    per_sample_local: np.ndarray
    rays: int
    skipped: int = 0


@dataclass
class LossGrads:
    d_alpha: np.ndarray    # (R, M); zero on terminal/padded entries
    d_color: np.ndarray    # (R, M, 3); terminal rows feed the env gradient


def _suffix_expectation(values, alphas, valid):
    """B_i = sum_{k>i} prod_{i<t<k}(1-a_t) a_k v_k via a backward sweep.

    `values` may be (R, M) or (R, M, C). Padded entries must carry a = 0 and
    v = 0 so the recurrence passes through them unchanged.
    """
    a = np.where(valid, alphas, 0.0)
    v = values
    extra = v.ndim == 3
    if extra:
        a = a[..., None]
    B = np.zeros_like(v)
    M = v.shape[1]
    for i in range(M - 2, -1, -1):
        B[:, i] = a[:, i + 1] * v[:, i + 1] + (1.0 - a[:, i + 1]) * B[:, i + 1]
    return B


def radiance_field_loss(batch: SampleBatch, metric: ColorMetric,
                        weight_alphas: np.ndarray | None = None):
    """Blended per-sample loss over a batch, with gradients.

    ``weight_alphas`` substitutes effective occupancies inside the (detached)
    weight products and the background expectation (see the background
    module); candidate terms always keep the true occupancy.
    """
    if batch.target is None:
        raise ValueError("batch.target must be set before computing a loss")
    l = metric.value(batch.color, batch.target[:, None, :])
    l = np.where(batch.valid, l, 0.0)
    wa = batch.alpha if weight_alphas is None else weight_alphas
    W = batch.weights(alphas=wa)
    local = W * np.where(batch.valid, batch.alpha, 0.0) * l
    total = float(local.sum())

    B = _suffix_expectation(l, wa, batch.valid)
    d_alpha = np.where(batch.candidate, W * (l - B), 0.0)
    gl = metric.grad_a(batch.color, batch.target[:, None, :])
    d_color = np.where(batch.valid[..., None],
                       (W * np.where(batch.valid, batch.alpha, 0.0))[..., None] * gl,
                       0.0)
    report = LossReport(total, local, batch.n_rays)
    return report, LossGrads(d_alpha, d_color)


def nerf_loss(batch: SampleBatch, metric: ColorMetric):
    """Image-space loss of alpha-blended colors, with gradients."""
    if batch.target is None:
        raise ValueError("batch.target must be set before computing a loss")
    W = batch.weights()
    wa = W * np.where(batch.valid, batch.alpha, 0.0)
    C = np.einsum("rm,rmc->rc", wa, np.where(batch.valid[..., None],
                                             batch.color, 0.0))
    per_ray = metric.value(C, batch.target)
    total = float(per_ray.sum())

    dC = metric.grad_a(C, batch.target)                       # (R, 3)
    Bc = _suffix_expectation(np.where(batch.valid[..., None], batch.color, 0.0),
                             batch.alpha, batch.valid)
    diff = np.where(batch.candidate[..., None], batch.color - Bc, 0.0)
    d_alpha = W * np.einsum("rmc,rc->rm", diff, dC)
    d_alpha = np.where(batch.candidate, d_alpha, 0.0)
    d_color = np.where(batch.valid[..., None], wa[..., None] * dC[:, None, :], 0.0)

    l = metric.value(batch.color, batch.target[:, None, :])
    local = np.where(batch.valid, wa * l, 0.0)
    report = LossReport(total, local, batch.n_rays)
    return report, LossGrads(d_alpha, d_color)


@dataclass
class RelaxedState:
    """Per-cell EMA of local losses; cells above tau are relaxed to volume."""

    resolution: np.ndarray
    ema_decay: float = 0.99
    tau: float | None = None
    ema: np.ndarray = dc_field(init=False)
    visited: np.ndarray = dc_field(init=False)

    def __post_init__(self):
        self.resolution = np.broadcast_to(
            np.asarray(self.resolution, dtype=np.int64), (3,)).copy()
        n = int(np.prod(self.resolution))
        self.ema = np.zeros(n, dtype=np.float64)
        self.visited = np.zeros(n, dtype=bool)

    @property
    def n_cells(self) -> int:
        return self.ema.shape[0]

    def flags(self) -> np.ndarray:
        if self.tau is None:
            return np.zeros(self.n_cells, dtype=bool)
        return self.ema > self.tau

    def flagged_fraction(self) -> float:
        nv = int(self.visited.sum())
        if nv == 0:
            return 0.0
        return float((self.flags() & self.visited).sum() / nv)

    def set_tau_from_quantile(self, q: float):
        vals = self.ema[self.visited]
        self.tau = float(np.quantile(vals, q)) if len(vals) else 0.0


def update_challenge(state: RelaxedState, cell_idx: np.ndarray,
                     local_losses: np.ndarray):
    """EMA update per visited cell: ema <- d*ema + (1-d)*mean(local loss)."""
    cell_idx = np.asarray(cell_idx).ravel()
    local = np.asarray(local_losses, dtype=np.float64).ravel()
    if len(cell_idx) == 0:
        return
    sums = np.bincount(cell_idx, weights=local, minlength=state.n_cells)
    counts = np.bincount(cell_idx, minlength=state.n_cells)
    hit = counts > 0
    mean = sums[hit] / counts[hit]
    d = state.ema_decay
    state.ema[hit] = d * state.ema[hit] + (1.0 - d) * mean
    state.visited |= hit


def relaxed_loss(batch: SampleBatch, metric: ColorMetric,
                 state: RelaxedState | None = None,
                 allow_blend: np.ndarray | None = None):
    """Volumetrically relaxed loss with the no-blend heuristic.

    Per sample the target becomes the goal color (target minus the color
    already accumulated in front, renormalized by the transmittance); the
    sample's blended color uses the detached expected color behind it. The
    blended branch is taken only where it strictly lowers the local error
    (and, when ``allow_blend`` is given, only where that mask permits).
    Samples whose up-front transmittance is below 1e-6 are skipped and
    counted in the report. Weights are detached.
    """
    if batch.target is None:
        raise ValueError("batch.target must be set before computing a loss")
    a = np.where(batch.valid, batch.alpha, 0.0)
    W = batch.weights()
    color = np.where(batch.valid[..., None], batch.color, 0.0)

    # exclusive prefix of blended color in front of each sample
    contrib = (W * a)[..., None] * color
    prev = np.cumsum(contrib, axis=1)
    prev = np.concatenate([np.zeros_like(prev[:, :1]), prev[:, :-1]], axis=1)

    ok = batch.valid & (W >= GOAL_TRANSMITTANCE_FLOOR)
    skipped = int((batch.valid & ~ok).sum())
    T = np.where(ok, W, 1.0)
    goal = (batch.target[:, None, :] - prev) / T[..., None]

    Ecol = _suffix_expectation(color, batch.alpha, batch.valid)
    blend = a[..., None] * color + (1.0 - a[..., None]) * Ecol

    l_un = metric.value(color, goal)
    l_bl = metric.value(blend, goal)
    use_blend = l_bl < l_un
    if allow_blend is not None:
        use_blend &= allow_blend
    use_blend &= ok

    local = np.where(ok, W * np.where(use_blend, l_bl, l_un), 0.0)
    total = float(local.sum())

    g_un = metric.grad_a(color, goal)
    g_bl = metric.grad_a(blend, goal)
    d_color = np.where(use_blend[..., None], a[..., None] * g_bl, g_un)
    d_color = np.where(ok[..., None], W[..., None] * d_color, 0.0)
    d_alpha = np.where(use_blend, W * np.einsum("rmc->rm", g_bl * (color - Ecol)),
                       0.0)
    d_alpha = np.where(batch.candidate & ok, d_alpha, 0.0)

    report = LossReport(total, local, batch.n_rays, skipped=skipped)
    return report, LossGrads(d_alpha, d_color)


def mixed_relaxed_loss(batch: SampleBatch, metric: ColorMetric,
                       flagged: np.ndarray):
    """Per-sample mixture used after the relaxation switch: flagged samples
    contribute relaxed terms, the rest keep the surface loss. Detached
    weights make both terms local, so selection composes exactly."""
    rep_s, g_s = radiance_field_loss(batch, metric)
    rep_r, g_r = relaxed_loss(batch, metric, allow_blend=flagged)
    pick = flagged & batch.valid
    local = np.where(pick, rep_r.per_sample_local, rep_s.per_sample_local)
    d_alpha = np.where(pick, g_r.d_alpha, g_s.d_alpha)
    d_color = np.where(pick[..., None], g_r.d_color, g_s.d_color)
    report = LossReport(float(local.sum()), local, batch.n_rays,
                        skipped=rep_r.skipped)
    return report, LossGrads(d_alpha, d_color)
