"""The optimization loop: batching, Adam updates, schedules, the relaxation
phase, and checkpointing.

Each iteration draws a fresh pixel batch with a generator seeded by
(config seed, iteration), so single-threaded runs are bit-deterministic and
resuming from a snapshot replays the exact same stream. Gradients are
hand-accumulated into the field buffers, averaged over the ray batch, and
applied with Adam (0.9/0.99, tiny epsilon so update magnitudes stay
scale-invariant deep into sigmoid saturation).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .background import BackgroundStrategy, effective_alphas
from .field import (Bounds, OccupancyField, RadianceGrid, load_fields, logit,
                    save_fields)
from .loss import (ColorMetric, LossReport, RelaxedState, mixed_relaxed_loss,
                   nerf_loss, radiance_field_loss, update_challenge)
from .march import march, scatter_batch_gradients
from .regularize import (LaplacianSchedule, WarmStartSchedule, clamp_occupancy,
                         laplacian_penalty, schedule_weight)
from .render import psnr, render_surface, render_volume
from .sensor import Dataset, RayBatch, pixel_rays

TRAIN_VERSION = 2
LAPLACIAN_POINT_CUTOFF = 1e-3


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RelaxConfig:
    enabled: bool = False
    after_iter: int | None = None   # default: iterations // 2
    quantile: float = 0.9
    ema_decay: float = 0.99


@dataclass
class TrainConfig:
    iterations: int = 3000
    rays_per_batch: int = 768
    step_fraction: float = 1.0 / 256.0   # marching step / bounds diagonal
    lr_occupancy: float = 0.2
    lr_color: float = 0.06
    lr_environment: float = 0.02
    metric: str = "l2"
    loss_kind: str = "ours"              # ours | nerf
    strategy: BackgroundStrategy = dc_field(default_factory=BackgroundStrategy)
    grid_resolution: int = 64
    sh_degree: int = 0
    init_alpha: float = 0.05
    laplacian_initial: float = 2e-3
    laplacian_final: float = 2e-5
    laplacian_eps_fraction: float = 1.0 / 1024.0  # of max bounds extent
    laplacian_max_points: int = 2048              # per-iteration stencil budget
    warm_start: WarmStartSchedule = dc_field(default_factory=WarmStartSchedule)
    relax: RelaxConfig = dc_field(default_factory=RelaxConfig)
    seed: int = 0
    pixel_jitter: bool = True
    snapshot_every: int = 0
    eval_every: int = 250
    log_every: int = 10

    def __post_init__(self):
        if self.iterations <= 0 or self.rays_per_batch <= 0:
            raise ValueError("iterations and rays_per_batch must be positive")
        if min(self.lr_occupancy, self.lr_color, self.lr_environment) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.step_fraction <= 0:
            raise ValueError("step_fraction must be positive")
        if self.loss_kind not in ("ours", "nerf"):
            raise ValueError("loss_kind must be 'ours' or 'nerf'")

    def relax_switch_iter(self) -> int | None:
        if not self.relax.enabled:
            return None
        return (self.relax.after_iter if self.relax.after_iter is not None
                else self.iterations // 2)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "strategy" in d and not isinstance(d["strategy"], BackgroundStrategy):
        s = d["strategy"]
        d["strategy"] = BackgroundStrategy(**s) if isinstance(s, dict) \
            else BackgroundStrategy(kind=s)
    if "warm_start" in d and isinstance(d["warm_start"], dict):
        d["warm_start"] = WarmStartSchedule(**d["warm_start"])
    if "relax" in d and isinstance(d["relax"], dict):
        d["relax"] = RelaxConfig(**d["relax"])
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)


class AdamState:
    """Per-parameter-group first/second moments (float32, stored as-is in
    checkpoints so resumed runs replay bit-exactly)."""

    def __init__(self, shapes):
        self.m = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}

    def step(self, key, grad, lr, t, beta1=0.9, beta2=0.99, eps=1e-15):
        m = self.m[key]
        v = self.v[key]
        g = grad.astype(np.float32)
        m *= np.float32(beta1)
        m += np.float32(1.0 - beta1) * g
        g *= g
        v *= np.float32(beta2)
        v += np.float32(1.0 - beta2) * g
        mh = m * np.float32(lr / (1.0 - beta1 ** t))
        vh = v * np.float32(1.0 / (1.0 - beta2 ** t))
        np.sqrt(vh, out=vh)
        vh += np.float32(eps)
        mh /= vh
        return mh


@dataclass
class Checkpoint:
    """Complete training state; round-trips bit-exactly through its file."""

    iteration: int
    occ: OccupancyField
    rad: RadianceGrid
    env: np.ndarray
    relax_state: RelaxedState
    adam: AdamState

    def save(self, path):
        parts = [self.env.astype("<f4").tobytes(),
                 struct.pack("<q", self.iteration)]
        for key in ("occ", "rad", "env"):
            parts.append(self.adam.m[key].astype("<f4").tobytes())
            parts.append(self.adam.v[key].astype("<f4").tobytes())
        rs = self.relax_state
        tau = np.nan if rs.tau is None else rs.tau
        parts.append(struct.pack("<dd", rs.ema_decay, tau))
        parts.append(rs.ema.astype("<f8").tobytes())
        parts.append(rs.visited.astype(np.uint8).tobytes())
        save_fields(path, self.occ, self.rad, trailer=b"".join(parts),
                    version=TRAIN_VERSION)

    @classmethod
    def load(cls, path):
        occ, rad, version, trailer = load_fields(path)
        if version < TRAIN_VERSION:
            # fields-only file: wrap with fresh training state
            env = np.full(3, 0.5, dtype=np.float32)
            adam = AdamState(_adam_shapes(occ, rad))
            return cls(0, occ, rad, env, RelaxedState(occ.resolution), adam)
        off = 0
        env = np.frombuffer(trailer, "<f4", 3, off).copy(); off += 12
        (iteration,) = struct.unpack_from("<q", trailer, off); off += 8
        adam = AdamState(_adam_shapes(occ, rad))
        for key in ("occ", "rad", "env"):
            n = adam.m[key].size
            adam.m[key] = np.frombuffer(trailer, "<f4", n, off).copy() \
                .reshape(adam.m[key].shape); off += 4 * n
            adam.v[key] = np.frombuffer(trailer, "<f4", n, off).copy() \
                .reshape(adam.v[key].shape); off += 4 * n
        decay, tau = struct.unpack_from("<dd", trailer, off); off += 16
        rs = RelaxedState(occ.resolution, ema_decay=decay,
                          tau=None if np.isnan(tau) else tau)
        n_cells = rs.n_cells
        rs.ema = np.frombuffer(trailer, "<f8", n_cells, off).copy(); off += 8 * n_cells
        rs.visited = np.frombuffer(trailer, np.uint8, n_cells, off) \
            .astype(bool).copy(); off += n_cells
        return cls(iteration, occ, rad, env, rs, adam)


def _adam_shapes(occ: OccupancyField, rad: RadianceGrid):
    return {"occ": occ.logits.shape, "rad": rad.coeffs.shape, "env": (3,)}


def init_fields(cfg: TrainConfig, bounds: Bounds, dataset: Dataset | None = None):
    """Fresh fields: near-empty occupancy prior (or dense for escape tests),
    mid-gray colors, environment color from the dataset mean."""
    occ = OccupancyField(cfg.grid_resolution, bounds,
                         init_logit=float(logit(cfg.init_alpha)))
    rad = RadianceGrid(cfg.grid_resolution, bounds, sh_degree=cfg.sh_degree,
                       init_rgb=0.5)
    env = (dataset.mean_color() if dataset is not None
           else np.full(3, 0.5)).astype(np.float32)
    return occ, rad, env


class _PixelPool:
    """Flattened training pixels: per-pixel camera id, coords, and target."""

    def __init__(self, dataset: Dataset):
        cam_ids, pix, targets = [], [], []
        for ci in dataset.train_idx:
            cam = dataset.cameras[ci]
            ys, xs = np.meshgrid(np.arange(cam.height), np.arange(cam.width),
                                 indexing="ij")
            cam_ids.append(np.full(cam.height * cam.width, ci, dtype=np.int64))
            pix.append(np.stack([xs.ravel(), ys.ravel()], axis=1))
            targets.append(dataset.images[ci].reshape(-1, 3))
        self.cam_ids = np.concatenate(cam_ids)
        self.pixels = np.concatenate(pix)
        self.targets = np.concatenate(targets)
        self.cameras = dataset.cameras

    def __len__(self):
        return len(self.cam_ids)

    def rays(self, idx, jitter):
        origins = np.empty((len(idx), 3))
        dirs = np.empty((len(idx), 3))
        cams = self.cam_ids[idx]
        for ci in np.unique(cams):
            sel = cams == ci
            o, d = pixel_rays(self.cameras[ci], self.pixels[idx[sel]],
                              None if jitter is None else jitter[sel])
            origins[sel] = o
            dirs[sel] = d
        return RayBatch(origins, dirs), self.targets[idx]


class Trainer:
    """Owns the mutable training state and runs iterations."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, bounds: Bounds,
                 checkpoint: Checkpoint | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.bounds = bounds
        self.pool = _PixelPool(dataset)
        self.metric = ColorMetric(cfg.metric)
        self.step = cfg.step_fraction * bounds.diagonal
        ext = float(np.max(bounds.extent))
        self.laplacian = LaplacianSchedule(
            cfg.laplacian_initial, cfg.laplacian_final, cfg.iterations,
            eps=cfg.laplacian_eps_fraction * ext)
        if checkpoint is not None:
            self.state = checkpoint
        else:
            occ, rad, env = init_fields(cfg, bounds, dataset)
            rs = RelaxedState(occ.resolution, ema_decay=cfg.relax.ema_decay)
            self.state = Checkpoint(0, occ, rad, env,
                                    rs, AdamState(_adam_shapes(occ, rad)))

    # -- single iteration -------------------------------------------------

    def train_step(self, i: int) -> LossReport:
        cfg = self.cfg
        st = self.state
        occ, rad = st.occ, st.rad
        rng = np.random.default_rng([cfg.seed, i])
        idx = rng.integers(0, len(self.pool), cfg.rays_per_batch)
        jitter = rng.random((cfg.rays_per_batch, 2)) if cfg.pixel_jitter else None
        rays, targets = self.pool.rays(idx, jitter)

        batch = march(occ, rad, rays, self.step, st.env.astype(np.float64))
        batch.target = targets

        switch = cfg.relax_switch_iter()
        relax_active = (cfg.loss_kind == "ours" and switch is not None
                        and i >= switch and st.relax_state.tau is not None)
        if cfg.loss_kind == "nerf":
            report, grads = nerf_loss(batch, self.metric)
        elif relax_active:
            flags = self._sample_flags(batch)
            report, grads = mixed_relaxed_loss(batch, self.metric, flags)
        else:
            eff = None
            if cfg.strategy.kind != "free_flight":
                eff = effective_alphas(cfg.strategy, batch, self.metric)
            report, grads = radiance_field_loss(batch, self.metric,
                                                weight_alphas=eff)

        if not np.isfinite(report.total):
            ray_tot = report.per_sample_local.sum(axis=1)
            bad = int(np.argmax(~np.isfinite(ray_tot)))
            raise TrainingDiverged(
                f"non-finite loss at iteration {i}, ray {bad} "
                f"(pixel index {int(idx[bad])})")

        occ.reset_grad()
        rad.reset_grad()
        env_grad = np.zeros(3)
        scale = 1.0 / cfg.rays_per_batch
        scatter_batch_gradients(batch, occ, rad, grads.d_alpha, grads.d_color,
                                env_grad=env_grad, scale=scale)

        lam = schedule_weight(self.laplacian, i)
        if lam > 0.0 and cfg.loss_kind == "ours":
            wa = batch.weights() * np.where(batch.valid, batch.alpha, 0.0)
            sel = batch.candidate & (wa > LAPLACIAN_POINT_CUTOFF)
            pts = batch.pos[sel]
            if len(pts) > cfg.laplacian_max_points:
                keep = rng.choice(len(pts), cfg.laplacian_max_points,
                                  replace=False)
                pts = pts[keep]
            if len(pts):
                pen, _, _ = laplacian_penalty(occ, pts, self.laplacian.eps,
                                              accumulate_grad=True,
                                              grad_scale=lam)
                report.total += lam * pen

        t = i + 1
        if cfg.lr_occupancy > 0:
            occ.logits -= st.adam.step("occ", occ.grad, cfg.lr_occupancy, t)
        if cfg.lr_color > 0:
            rad.coeffs -= st.adam.step("rad", rad.grad, cfg.lr_color, t)
        if cfg.lr_environment > 0:
            upd = st.adam.step("env", env_grad, cfg.lr_environment, t)
            st.env = np.clip(st.env - upd, 0.0, 1.0).astype(np.float32)

        if cfg.loss_kind == "ours":
            clamp_occupancy(occ, i, cfg.warm_start)

        cells, inside = occ.cell_index(batch.pos[batch.candidate])
        local = report.per_sample_local[batch.candidate]
        update_challenge(st.relax_state, cells[inside], local[inside])
        if switch is not None and i + 1 == switch:
            st.relax_state.set_tau_from_quantile(cfg.relax.quantile)

        st.iteration = i + 1
        return report

    def _sample_flags(self, batch) -> np.ndarray:
        flags = np.zeros(batch.t.shape, dtype=bool)
        cand = batch.candidate
        cells, inside = self.state.occ.cell_index(batch.pos[cand])
        f = np.zeros(len(cells), dtype=bool)
        f[inside] = self.state.relax_state.flags()[cells[inside]]
        flags[cand] = f
        return flags

    # -- evaluation helpers ------------------------------------------------

    def heldout_psnr(self, mode: str = "surface", max_views: int | None = None):
        idx = self.dataset.heldout_idx
        if len(idx) == 0:
            idx = self.dataset.train_idx[:1]
        if max_views is not None:
            idx = idx[:max_views]
        st = self.state
        vals = []
        for ci in idx:
            cam = self.dataset.cameras[ci]
            if mode == "surface":
                img, _ = render_surface(st.occ, st.rad, cam, st.env, self.step)
            else:
                img, _ = render_volume(st.occ, st.rad, cam, st.env, self.step)
            vals.append(psnr(img, self.dataset.images[ci]))
        return float(np.mean(vals))


def train(dataset: Dataset, cfg: TrainConfig, bounds: Bounds,
          out_dir=None, resume_from=None, progress=None,
          quiet: bool = True) -> Checkpoint:
    """Run the full loop; returns the final state.

    With `out_dir`, writes progress.csv, a loss/PSNR curve figure, periodic
    snapshots, and checkpoint_final.bin. `progress` may be a list to collect
    (iter, loss, psnr) records in-process.
    """
    ckpt = Checkpoint.load(resume_from) if resume_from else None
    tr = Trainer(dataset, cfg, bounds, checkpoint=ckpt)
    records = progress if progress is not None else []
    out = None
    if out_dir is not None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    for i in range(tr.state.iteration, cfg.iterations):
        report = tr.train_step(i)
        done = i + 1
        if cfg.log_every and (done % cfg.log_every == 0 or done == cfg.iterations):
            rec = {"iter": done,
                   "loss": report.total / max(report.rays, 1),
                   "psnr": np.nan}
            if cfg.eval_every and (done % cfg.eval_every == 0
                                   or done == cfg.iterations):
                mode = "volume" if cfg.loss_kind == "nerf" else "surface"
                rec["psnr"] = tr.heldout_psnr(mode=mode, max_views=1)
                if not quiet:
                    print(f"[train] iter {done} loss {rec['loss']:.5f} "
                          f"psnr {rec['psnr']:.2f}")
            records.append(rec)
        if out is not None and cfg.snapshot_every and done % cfg.snapshot_every == 0:
            tr.state.save(out / f"checkpoint_{done:06d}.bin")

    if out is not None:
        tr.state.save(out / "checkpoint_final.bin")
        from .report import write_progress
        write_progress(out, records)
    return tr.state
