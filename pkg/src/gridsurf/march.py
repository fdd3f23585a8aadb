"""Fixed-step ray marching.

Every loss and renderer consumes the arrays produced here: per-ray sample
positions at t_enter + (k + 1/2) * step, decoded occupancies and colors, and
one appended opaque terminal sample carrying the environment color. The
terminal sample makes the free-flight stopping distribution proper (the
weights w_i = prod_{j<i}(1 - a_j) then satisfy sum_i w_i a_i = 1 exactly)
and gives escaped rays a gradient path into the environment color.

Batches are rectangular (rays x max_samples) with a per-ray count; padding
carries alpha = 0 so cumulative products pass through untouched.
"""

from __future__ import annotations

import numpy as np

from .field import Bounds, OccupancyField, RadianceGrid, sh_basis
from .sensor import Ray, RayBatch


def intersect_bounds(ray: Ray, bounds: Bounds):
    """Slab interval of a single ray, clipped to [t_min, t_max]; None if empty."""
    ent, ext, hit = intersect_bounds_batch(
        ray.origin[None], ray.direction[None],
        np.asarray([ray.t_min]), np.asarray([ray.t_max]), bounds)
    return (float(ent[0]), float(ext[0])) if hit[0] else None


def intersect_bounds_batch(origins, dirs, t_min, t_max, bounds: Bounds):
    """Vectorized slab test -> (t_enter, t_exit, hit). Zero-length grazing
    intervals count as misses."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bounds.lo - o) * inv
        t1 = (bounds.hi - o) * inv
    near = np.minimum(t0, t1)
    far = np.maximum(t0, t1)
    par = d == 0.0
    # strictly inside: a parallel ray grazing along a face or edge misses
    inside_slab = (o > bounds.lo) & (o < bounds.hi)
    near = np.where(par, np.where(inside_slab, -np.inf, np.inf), near)
    far = np.where(par, np.where(inside_slab, np.inf, -np.inf), far)
    t_enter = np.maximum(near.max(axis=-1), t_min)
    t_exit = np.minimum(far.min(axis=-1), t_max)
    return t_enter, t_exit, t_enter < t_exit


class SampleBatch:
    """Marched samples for a bundle of rays (rectangular, padded).

    Index [r, k] addresses sample k of ray r. ``n_samples[r]`` counts valid
    samples including the terminal one (always last, alpha = 1, color = env).
    ``target`` is filled by the training loop.
    """

    def __init__(self, t, pos, alpha, color, n_samples, dirs, origins,
                 coords=None, basis=None, clamp_mask=None, env=None):
        self.t = t                      # (R, M)
        self.pos = pos                  # (R, M, 3)
        self.alpha = alpha              # (R, M)
        self.color = color              # (R, M, 3)
        self.n_samples = n_samples      # (R,)
        self.dirs = dirs                # (R, 3)
        self.origins = origins          # (R, 3)
        self.target = None              # (R, 3), set by callers
        self.env = env
        # forward-pass caches for the backward scatter
        self._coords = coords
        self._basis = basis
        self._clamp_mask = clamp_mask
        R, M = t.shape
        cols = np.arange(M)[None, :]
        self.valid = cols < n_samples[:, None]           # includes terminal
        self.terminal = cols == (n_samples - 1)[:, None]
        self.candidate = self.valid & ~self.terminal

    @property
    def n_rays(self):
        return self.t.shape[0]

    @property
    def max_samples(self):
        return self.t.shape[1]

    def weights(self, alphas=None) -> np.ndarray:
        """Free-flight weights w_i = prod_{j<i}(1 - a_j), exclusive."""
        a = self.alpha if alphas is None else alphas
        one_minus = np.where(self.valid, 1.0 - a, 1.0)
        w = np.cumprod(one_minus, axis=1)
        w = np.concatenate([np.ones((a.shape[0], 1)), w[:, :-1]], axis=1)
        return np.where(self.valid, w, 0.0)


def march(occ: OccupancyField, rad: RadianceGrid, rays, step: float,
          env) -> SampleBatch:
    """March rays through the field box at fixed step.

    `rays` is a RayBatch (or a single Ray). Rays that miss the box produce a
    batch holding only their terminal sample.
    """
    if isinstance(rays, Ray):
        rays = RayBatch.from_rays([rays])
    if step <= 0:
        raise ValueError("step must be positive")
    env = np.asarray(env, dtype=np.float64)
    R = len(rays)
    t_enter, t_exit, hit = intersect_bounds_batch(
        rays.origins, rays.dirs, rays.t_min, rays.t_max, occ.bounds)
    span = np.where(hit, t_exit - t_enter, 0.0)
    counts = np.floor(span / step + 0.5).astype(np.int64)
    counts = np.where(hit, counts, 0)
    n_samples = counts + 1
    M = int(n_samples.max())

    cols = np.arange(M)[None, :]
    t = t_enter[:, None] + (cols + 0.5) * step
    cand = cols < counts[:, None]
    term = cols == counts[:, None]
    # terminal sits at the exit point (never evaluated against the fields)
    t = np.where(term, np.where(hit, t_exit, 0.0)[:, None], t)
    pos = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]

    alpha = np.zeros((R, M))
    color = np.zeros((R, M, 3))
    alpha[term] = 1.0
    color[term] = env

    flat_pos = pos[cand]
    coords = None
    basis_ray = sh_basis(rad.sh_degree, rays.dirs)
    clamp_mask = None
    if len(flat_pos):
        coords = occ.coords(flat_pos)
        alpha[cand] = occ.eval_alpha(flat_pos, coords=coords)
        ray_of = np.broadcast_to(np.arange(R)[:, None], (R, M))[cand]
        basis = basis_ray[ray_of]
        raw = rad._decode(coords, basis)
        color[cand] = np.clip(raw, 0.0, 1.0)
        clamp_mask = (raw > 0.0) & (raw < 1.0)
    return SampleBatch(t, pos, alpha, color, n_samples, rays.dirs,
                       rays.origins, coords=coords, basis=basis_ray,
                       clamp_mask=clamp_mask, env=env)


def synthetic_batch(alphas, colors, targets) -> SampleBatch:
    """Build a SampleBatch directly from per-ray sample arrays.

    For loss-level tests and oracles: `alphas` is a list of (m_r,) rows each
    ending in a terminal alpha of 1, `colors` the matching (m_r, 3) rows.
    Positions/t are synthesized on a straight dummy ray.
    """
    alphas = [np.asarray(a, dtype=np.float64) for a in alphas]
    colors = [np.asarray(c, dtype=np.float64).reshape(len(a), 3)
              for a, c in zip(alphas, colors)]
    for a in alphas:
        if len(a) == 0 or a[-1] != 1.0:
            raise ValueError("each ray needs a terminal alpha of 1 last")
    R = len(alphas)
    M = max(len(a) for a in alphas)
    alpha = np.zeros((R, M))
    color = np.zeros((R, M, 3))
    t = np.zeros((R, M))
    n = np.zeros(R, dtype=np.int64)
    for r, (a, c) in enumerate(zip(alphas, colors)):
        m = len(a)
        alpha[r, :m] = a
        color[r, :m] = c
        t[r, :m] = np.arange(m) + 0.5
        n[r] = m
    dirs = np.tile(np.array([0.0, 0.0, 1.0]), (R, 1))
    origins = np.zeros((R, 3))
    pos = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    batch = SampleBatch(t, pos, alpha, color, n, dirs, origins)
    batch.target = np.asarray(targets, dtype=np.float64).reshape(R, 3)
    return batch


def scatter_batch_gradients(batch: SampleBatch, occ: OccupancyField,
                            rad: RadianceGrid, d_alpha, d_color,
                            env_grad: np.ndarray | None = None,
                            scale: float = 1.0):
    """Push per-sample loss gradients into the field accumulators.

    d_alpha (R, M) and d_color (R, M, 3) follow the batch layout; terminal
    color gradients accumulate into `env_grad` (shape (3,)) when given.
    """
    cand = batch.candidate
    if batch._coords is not None:
        R, M = batch.t.shape
        ray_of = np.broadcast_to(np.arange(R)[:, None], (R, M))[cand]
        occ.scatter_grad_alpha(
            batch.pos[cand], d_alpha[cand] * scale,
            coords=batch._coords, alphas=batch.alpha[cand])
        rad.scatter_grad_color(
            batch.pos[cand], None, d_color[cand] * scale,
            coords=batch._coords, basis=batch._basis[ray_of],
            clamp_mask=batch._clamp_mask)
    if env_grad is not None:
        env_grad += scale * d_color[batch.terminal].sum(axis=0)
