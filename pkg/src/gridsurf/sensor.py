"""Cameras, ray generation, the analytic ground-truth raytracer, and
synthetic dataset generation.

Conventions: camera frame is x-right, y-down, z-forward; pixel (px, py) maps
to continuous image coordinate (px + jx, py + jy) with jitter in [0,1)^2 and
(0.5, 0.5) meaning the pixel center. Ground-truth shading is Lambertian
albedo, flat by default or with one fixed directional light; primitives may
carry an opacity < 1, in which case the tracer composites front-to-back.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .field import Bounds


@dataclass
class Camera:
    pose_r: np.ndarray   # 3x3 rotation, columns = (right, down, forward)
    pose_t: np.ndarray   # world position
    fov_y: float         # radians
    width: int
    height: int

    def __post_init__(self):
        self.pose_r = np.asarray(self.pose_r, dtype=np.float64)
        self.pose_t = np.asarray(self.pose_t, dtype=np.float64)
        rtr = self.pose_r.T @ self.pose_r
        if not np.allclose(rtr, np.eye(3), atol=1e-6) or \
                abs(np.linalg.det(self.pose_r) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with det +1")
        if not (0.0 < self.fov_y < np.pi):
            raise ValueError("fov_y must lie in (0, pi)")

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / np.tan(self.fov_y / 2.0)

    @property
    def forward(self) -> np.ndarray:
        return self.pose_r[:, 2]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.t_min < 0 or not self.t_max > self.t_min:
            raise ValueError("require 0 <= t_min < t_max")


class RayBatch:
    """Struct-of-arrays ray bundle."""

    def __init__(self, origins, dirs, t_min=None, t_max=None):
        self.origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        self.dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        n = self.origins.shape[0]
        self.t_min = np.zeros(n) if t_min is None else np.broadcast_to(
            np.asarray(t_min, dtype=np.float64), (n,)).copy()
        self.t_max = np.full(n, np.inf) if t_max is None else np.broadcast_to(
            np.asarray(t_max, dtype=np.float64), (n,)).copy()

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def from_rays(cls, rays):
        rays = list(rays)
        return cls(
            [r.origin for r in rays], [r.direction for r in rays],
            [r.t_min for r in rays], [r.t_max for r in rays],
        )


def look_at_rotation(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rotation with forward toward target; columns (right, down, forward)."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera position coincides with look-at target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(fwd, up)) < 1e-8:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def pixel_ray(cam: Camera, px, jitter=None) -> Ray:
    """Ray through pixel (px, py); jitter in [0,1)^2, default = center."""
    o, d = pixel_rays(cam, np.asarray([px], dtype=np.int64),
                      None if jitter is None else np.asarray([jitter]))
    return Ray(o[0], d[0])


def pixel_rays(cam: Camera, pixels: np.ndarray, jitter: np.ndarray | None = None):
    """Vectorized pixel_ray: pixels (N,2) int -> (origins, unit dirs)."""
    pixels = np.asarray(pixels)
    if np.any(pixels < 0) or np.any(pixels[:, 0] >= cam.width) or \
            np.any(pixels[:, 1] >= cam.height):
        raise ValueError("pixel out of range")
    if jitter is None:
        jitter = np.full(pixels.shape, 0.5)
    else:
        jitter = np.asarray(jitter, dtype=np.float64)
        if np.any(jitter < 0.0) or np.any(jitter >= 1.0):
            raise ValueError("jitter offsets must lie in [0, 1)")
    u = pixels[:, 0] + jitter[:, 0]
    v = pixels[:, 1] + jitter[:, 1]
    f = cam.focal
    d_cam = np.stack(
        [(u - cam.width / 2.0) / f, (v - cam.height / 2.0) / f,
         np.ones_like(u)], axis=1)
    d_world = d_cam @ cam.pose_r.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.pose_t, d_world.shape).copy()
    return origins, d_world


def camera_rays(cam: Camera):
    """One centered ray per pixel, row-major; (origins, dirs) of shape (H*W, 3)."""
    ys, xs = np.meshgrid(np.arange(cam.height), np.arange(cam.width),
                         indexing="ij")
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return pixel_rays(cam, pix)


# ---------------------------------------------------------------------------
# primitives and the analytic tracer
# ---------------------------------------------------------------------------

def _rotation_from_euler(angles) -> np.ndarray:
    ax, ay, az = [float(a) for a in angles]
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class Primitive:
    """A watertight shape with Lambertian albedo.

    albedo is either an RGB triple or ("checker", rgb_a, rgb_b, scale) which
    colors by parity of the local-frame lattice cell. opacity < 1 makes the
    tracer blend with whatever lies behind.
    """

    shape: str                       # sphere | box | torus
    center: np.ndarray
    # sphere: radius; box: half-extents (3,); torus: (major R, minor r)
    params: np.ndarray
    albedo: tuple = (0.8, 0.8, 0.8)
    rotation: np.ndarray | None = None
    opacity: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.params = np.atleast_1d(np.asarray(self.params, dtype=np.float64))
        if self.rotation is not None:
            self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")

    def to_local(self, p):
        q = p - self.center
        if self.rotation is not None:
            q = q @ self.rotation
        return q

    def dir_to_local(self, d):
        return d @ self.rotation if self.rotation is not None else d

    def normal_to_world(self, n):
        return n @ self.rotation.T if self.rotation is not None else n

    def sdf(self, p: np.ndarray) -> np.ndarray:
        """Exact signed distance in world units, p of shape (..., 3)."""
        q = self.to_local(np.asarray(p, dtype=np.float64))
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=-1) - self.params[0]
        if self.shape == "box":
            d = np.abs(q) - self.params
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(np.max(d, axis=-1), 0.0)
            return outside + inside
        if self.shape == "torus":
            big, small = self.params
            ring = np.hypot(np.hypot(q[..., 0], q[..., 1]) - big, q[..., 2])
            return ring - small
        raise ValueError(f"unknown shape {self.shape!r}")

    def shade_albedo(self, p: np.ndarray) -> np.ndarray:
        a = self.albedo
        if isinstance(a, tuple) and len(a) == 4 and a[0] == "checker":
            _, ca, cb, scale = a
            q = np.floor(self.to_local(p) / scale).astype(np.int64)
            parity = (q.sum(axis=-1) & 1).astype(bool)
            out = np.where(parity[..., None], np.asarray(cb, dtype=np.float64),
                           np.asarray(ca, dtype=np.float64))
            return out
        return np.broadcast_to(np.asarray(a, dtype=np.float64),
                               np.asarray(p).shape[:-1] + (3,)).copy()

    def normal(self, p: np.ndarray) -> np.ndarray:
        q = self.to_local(np.asarray(p, dtype=np.float64))
        if self.shape == "sphere":
            n = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
        elif self.shape == "box":
            d = np.abs(q) - self.params
            ax = np.argmax(d, axis=-1)
            n = np.zeros_like(q)
            np.put_along_axis(n, ax[..., None],
                              np.take_along_axis(np.sign(q), ax[..., None], -1), -1)
        elif self.shape == "torus":
            big = self.params[0]
            rho = np.maximum(np.hypot(q[..., 0], q[..., 1]), 1e-12)
            ring = np.stack([q[..., 0] * big / rho, q[..., 1] * big / rho,
                             np.zeros_like(rho)], axis=-1)
            n = q - ring
            n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
        else:
            raise ValueError(self.shape)
        return self.normal_to_world(n)


@dataclass
class PrimitiveScene:
    primitives: list
    environment_color: tuple = (0.5, 0.5, 0.5)
    shading: str = "flat"                    # flat | directional
    light_dir: tuple = (0.4, 0.3, -0.85)
    ambient: float = 0.35

    def sdf(self, p: np.ndarray) -> np.ndarray:
        if not self.primitives:
            return np.full(np.asarray(p).shape[:-1], np.inf)
        return np.min(np.stack([pr.sdf(p) for pr in self.primitives]), axis=0)

    def occupancy(self, p: np.ndarray) -> np.ndarray:
        return (self.sdf(p) <= 0.0).astype(np.float64)


def _intersect_primitive(prim: Primitive, o, d):
    """Nearest positive hit distance per ray (inf for miss). Vectorized."""
    lo = prim.to_local(o)
    ld = prim.dir_to_local(d)
    n = o.shape[0]
    t = np.full(n, np.inf)
    if prim.shape == "sphere":
        r = prim.params[0]
        b = np.einsum("nd,nd->n", lo, ld)
        c = np.einsum("nd,nd->n", lo, lo) - r * r
        disc = b * b - c
        ok = disc >= 0.0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        cand = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
        t = np.where(ok, cand, np.inf)
    elif prim.shape == "box":
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / ld
            ta = (-prim.params - lo) * inv
            tb = (prim.params - lo) * inv
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        par = ld == 0.0
        inside_slab = np.abs(lo) <= prim.params
        near = np.where(par, np.where(inside_slab, -np.inf, np.inf), near)
        far = np.where(par, np.where(inside_slab, np.inf, -np.inf), far)
        t_en = near.max(axis=1)
        t_ex = far.min(axis=1)
        hit = (t_en < t_ex) & (t_ex > 1e-9)
        cand = np.where(t_en > 1e-9, t_en, t_ex)
        t = np.where(hit, cand, np.inf)
    elif prim.shape == "torus":
        # conservative sphere tracing on the exact SDF + bisection refine
        t_cur = np.full(n, 1e-4)
        limit = 1e4
        alive = np.ones(n, dtype=bool)
        hit_t = np.full(n, np.inf)
        big, small = prim.params
        for _ in range(256):
            if not alive.any():
                break
            p = lo[alive] + t_cur[alive, None] * ld[alive]
            dist = np.hypot(np.hypot(p[..., 0], p[..., 1]) - big, p[..., 2]) - small
            hit_now = dist < 1e-7
            idx = np.where(alive)[0]
            hit_idx = idx[hit_now]
            hit_t[hit_idx] = t_cur[hit_idx]
            t_cur[idx] += np.maximum(dist, 1e-7)
            dead = hit_now | (t_cur[idx] > limit)
            alive[idx[dead]] = False
        t = hit_t
    else:
        raise ValueError(prim.shape)
    return t


def trace_ground_truth(scene: PrimitiveScene, ray: Ray) -> np.ndarray:
    """RGB seen along one ray (nearest-hit Lambertian, else environment)."""
    return trace_rays(scene, ray.origin[None], ray.direction[None])[0]


def trace_rays(scene: PrimitiveScene, origins, dirs, depth: int = 8):
    """Vectorized tracer; composites through semi-transparent primitives."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = o.shape[0]
    env = np.asarray(scene.environment_color, dtype=np.float64)
    out = np.broadcast_to(env, (n, 3)).copy()
    if not scene.primitives or depth <= 0:
        return out
    ts = np.stack([_intersect_primitive(p, o, d) for p in scene.primitives])
    best = np.argmin(ts, axis=0)
    t_hit = ts[best, np.arange(n)]
    hit = np.isfinite(t_hit)
    if not hit.any():
        return out
    for k, prim in enumerate(scene.primitives):
        sel = hit & (best == k)
        if not sel.any():
            continue
        p = o[sel] + t_hit[sel, None] * d[sel]
        col = prim.shade_albedo(p)
        if scene.shading == "directional":
            l = -np.asarray(scene.light_dir, dtype=np.float64)
            l = l / np.linalg.norm(l)
            nrm = prim.normal(p)
            lam = np.abs(nrm @ l)
            col = col * (scene.ambient + (1.0 - scene.ambient) * lam)[:, None]
        if prim.opacity < 1.0:
            # one blend per object: continue past the primitive's far side
            t_exit = _intersect_primitive(prim, p + 1e-6 * d[sel], d[sel])
            t_exit = np.where(np.isfinite(t_exit), t_exit, 0.0)
            q = p + (t_exit[:, None] + 2e-6) * d[sel]
            behind = trace_rays(scene, q, d[sel], depth - 1)
            col = prim.opacity * col + (1.0 - prim.opacity) * behind
        out[sel] = col
    return out


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass
class RigSpec:
    count: int = 24
    radius: float = 3.0
    kind: str = "sphere"            # sphere | ring
    elevation: float = 0.35         # radians, ring only
    look_at: tuple = (0.0, 0.0, 0.0)
    width: int = 96
    height: int = 96
    fov_y: float = np.deg2rad(45.0)
    held_out_every: int = 8

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("rig needs at least 2 cameras")
        if self.radius <= 0:
            raise ValueError("rig radius must be positive")


@dataclass
class Dataset:
    cameras: list
    images: list                    # float images in [0,1], shape (H, W, 3)
    train_idx: np.ndarray
    heldout_idx: np.ndarray

    def __post_init__(self):
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError("image dims must match camera dims")

    @property
    def n_pixels(self) -> int:
        return sum(im.shape[0] * im.shape[1] for im in self.images)

    def mean_color(self) -> np.ndarray:
        return np.mean([self.images[i].mean(axis=(0, 1))
                        for i in self.train_idx], axis=0)


def rig_cameras(rig: RigSpec):
    center = np.asarray(rig.look_at, dtype=np.float64)
    cams = []
    for i in range(rig.count):
        if rig.kind == "ring":
            az = 2.0 * np.pi * i / rig.count
            el = rig.elevation
        elif rig.kind == "sphere":
            # Fibonacci lattice over a band, avoiding the poles
            z = 0.85 - 1.55 * (i + 0.5) / rig.count
            el = np.arcsin(z)
            az = i * np.pi * (3.0 - np.sqrt(5.0))
        else:
            raise ValueError(f"unknown rig kind {rig.kind!r}")
        pos = center + rig.radius * np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(look_at_rotation(pos, center), pos,
                           rig.fov_y, rig.width, rig.height))
    return cams


def render_scene_image(scene: PrimitiveScene, cam: Camera, threads: int = 1):
    o, d = camera_rays(cam)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        chunks = np.array_split(np.arange(len(o)), threads)
        img = np.empty((len(o), 3))
        with ThreadPoolExecutor(threads) as ex:
            for ch, res in zip(chunks, ex.map(
                    lambda c: trace_rays(scene, o[c], d[c]), chunks)):
                img[ch] = res
    else:
        img = trace_rays(scene, o, d)
    return img.reshape(cam.height, cam.width, 3)


def generate_dataset(scene: PrimitiveScene, rig: RigSpec, seed: int = 0,
                     threads: int = 1) -> Dataset:
    """Render every rig camera with the analytic tracer.

    Images are deterministic functions of (scene, rig); the seed is recorded
    for downstream consumers but the tracer itself draws no random numbers.
    """
    cams = rig_cameras(rig)
    images = [render_scene_image(scene, c, threads=threads) for c in cams]
    idx = np.arange(rig.count)
    held = idx[idx % rig.held_out_every == rig.held_out_every - 1] \
        if rig.held_out_every > 0 else np.array([], dtype=np.int64)
    train = np.setdiff1d(idx, held)
    if len(train) == 0:
        train, held = idx, np.array([], dtype=np.int64)
    return Dataset(cams, images, train, held)


# ---------------------------------------------------------------------------
# scene / rig config files and dataset storage
# ---------------------------------------------------------------------------

def _parse_albedo(spec):
    if isinstance(spec, dict) and "checker" in spec:
        ch = spec["checker"]
        return ("checker", tuple(ch["a"]), tuple(ch["b"]),
                float(ch.get("scale", 0.25)))
    return tuple(float(c) for c in spec)


def scene_from_config(cfg: dict) -> PrimitiveScene:
    prims = []
    for p in cfg.get("primitives", []):
        shape = p["shape"]
        if shape == "sphere":
            params = [float(p["radius"])]
        elif shape == "box":
            params = [float(v) / 2.0 for v in p["size"]]
        elif shape == "torus":
            params = [float(p["major_radius"]), float(p["minor_radius"])]
        else:
            raise ValueError(f"unknown primitive shape {shape!r}")
        rot = None
        if "rotation_deg" in p:
            rot = _rotation_from_euler(np.deg2rad(p["rotation_deg"]))
        prims.append(Primitive(
            shape=shape, center=p.get("center", (0, 0, 0)), params=params,
            albedo=_parse_albedo(p.get("albedo", (0.8, 0.8, 0.8))),
            rotation=rot, opacity=float(p.get("opacity", 1.0))))
    return PrimitiveScene(
        primitives=prims,
        environment_color=tuple(cfg.get("environment", (0.5, 0.5, 0.5))),
        shading=cfg.get("shading", "flat"),
        light_dir=tuple(cfg.get("light_dir", (0.4, 0.3, -0.85))),
        ambient=float(cfg.get("ambient", 0.35)))


def rig_from_config(cfg: dict) -> RigSpec:
    known = {f for f in RigSpec.__dataclass_fields__}
    kw = {k: v for k, v in cfg.items() if k in known}
    if "fov_deg" in cfg:
        kw["fov_y"] = np.deg2rad(float(cfg["fov_deg"]))
    if "look_at" in kw:
        kw["look_at"] = tuple(kw["look_at"])
    return RigSpec(**kw)


def bounds_from_config(cfg: dict) -> Bounds:
    return Bounds(np.asarray(cfg["lo"], dtype=np.float64),
                  np.asarray(cfg["hi"], dtype=np.float64))


def load_config(path) -> dict:
    with open(path) as f:
        cfg = yaml.safe_load(f)
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path} must be a mapping")
    return cfg


def save_dataset(ds: Dataset, out_dir, bounds: Bounds | None = None,
                 extra_meta: dict | None = None):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    meta = {
        "cameras": [
            {
                "rotation": c.pose_r.reshape(-1).tolist(),
                "position": c.pose_t.tolist(),
                "fov_y": float(c.fov_y),
                "width": c.width,
                "height": c.height,
            }
            for c in ds.cameras
        ],
        "train_idx": ds.train_idx.tolist(),
        "heldout_idx": ds.heldout_idx.tolist(),
    }
    if bounds is not None:
        meta["bounds"] = {"lo": bounds.lo.tolist(), "hi": bounds.hi.tolist()}
    if extra_meta:
        meta.update(extra_meta)
    with open(out / "meta.yaml", "w") as f:
        yaml.safe_dump(meta, f, sort_keys=True)
    for i, img in enumerate(ds.images):
        np.save(out / "images" / f"cam_{i:03d}.npy", img.astype(np.float32))
        u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(u8).save(out / "images" / f"cam_{i:03d}.png")


def load_dataset(ds_dir):
    ds_dir = Path(ds_dir)
    meta_path = ds_dir / "meta.yaml"
    if not meta_path.exists():
        raise FileNotFoundError(f"no dataset at {ds_dir} (missing meta.yaml)")
    with open(meta_path) as f:
        meta = yaml.safe_load(f)
    cams, images = [], []
    for i, c in enumerate(meta["cameras"]):
        cams.append(Camera(np.asarray(c["rotation"]).reshape(3, 3),
                           np.asarray(c["position"]), float(c["fov_y"]),
                           int(c["width"]), int(c["height"])))
        images.append(np.load(ds_dir / "images" / f"cam_{i:03d}.npy")
                      .astype(np.float64))
    ds = Dataset(cams, images, np.asarray(meta["train_idx"], dtype=np.int64),
                 np.asarray(meta["heldout_idx"], dtype=np.int64))
    bounds = None
    if "bounds" in meta:
        bounds = Bounds(np.asarray(meta["bounds"]["lo"]),
                        np.asarray(meta["bounds"]["hi"]))
    return ds, bounds
