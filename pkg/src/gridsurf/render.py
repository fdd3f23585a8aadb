"""Surface and volumetric rendering, mesh extraction, and evaluation metrics.

Surface rendering marches each pixel ray and returns the radiance of the
first sample whose occupancy exceeds the level threshold, stopping there;
volumetric rendering alpha-composites every sample plus the environment.
Both report field-evaluation counters (occupancy and color queries each
count as one evaluation) so the efficiency of early termination can be
measured.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree
from skimage import measure

from .field import OccupancyField, RadianceGrid, sh_basis
from .march import intersect_bounds_batch, march
from .sensor import Camera, RayBatch, camera_rays

PSNR_CAP_DB = 99.0


@dataclass
class RenderStats:
    rays: int
    alpha_evals: int
    color_evals: int

    @property
    def field_evals(self) -> int:
        return self.alpha_evals + self.color_evals

    @property
    def mean_evals_per_ray(self) -> float:
        return self.field_evals / max(self.rays, 1)


def _chunked(n, chunk):
    for s in range(0, n, chunk):
        yield np.arange(s, min(s + chunk, n))


def render_surface(occ: OccupancyField, rad: RadianceGrid, cam: Camera,
                   env, step: float, threshold: float = 0.5,
                   chunk: int = 8192, threads: int = 1):
    """First-hit surface render -> (image (H,W,3), RenderStats)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    o, d = camera_rays(cam)
    env = np.asarray(env, dtype=np.float64)
    img = np.empty((len(o), 3))
    counters = np.zeros(2, dtype=np.int64)

    def run(sel):
        col, a_ev, c_ev = _surface_rays(occ, rad, o[sel], d[sel], env, step,
                                        threshold)
        img[sel] = col
        return a_ev, c_ev

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            for a_ev, c_ev in ex.map(run, _chunked(len(o), chunk)):
                counters += (a_ev, c_ev)
    else:
        for sel in _chunked(len(o), chunk):
            a_ev, c_ev = run(sel)
            counters += (a_ev, c_ev)
    stats = RenderStats(len(o), int(counters[0]), int(counters[1]))
    return img.reshape(cam.height, cam.width, 3), stats


def _surface_rays(occ, rad, o, d, env, step, threshold):
    n = len(o)
    t_enter, t_exit, hit = intersect_bounds_batch(
        o, d, np.zeros(n), np.full(n, np.inf), occ.bounds)
    color = np.broadcast_to(env, (n, 3)).copy()
    counts = np.where(hit, np.floor((t_exit - t_enter) / step + 0.5), 0)
    counts = counts.astype(np.int64)
    alive = hit & (counts > 0)
    a_ev = 0
    c_ev = 0
    k = 0
    basis = sh_basis(rad.sh_degree, d)
    while alive.any():
        idx = np.where(alive)[0]
        t = t_enter[idx] + (k + 0.5) * step
        p = o[idx] + t[:, None] * d[idx]
        a = occ.eval_alpha(p)
        a_ev += len(idx)
        hits = a > threshold
        if hits.any():
            hi = idx[hits]
            color[hi] = rad.eval_color(p[hits], d[hi], basis=basis[hi])
            c_ev += int(hits.sum())
            alive[hi] = False
        k += 1
        alive &= counts > k
    return color, a_ev, c_ev


def render_volume(occ: OccupancyField, rad: RadianceGrid, cam: Camera,
                  env, step: float, chunk: int = 8192, threads: int = 1):
    """Alpha-composited render (terminal environment included) + stats."""
    o, d = camera_rays(cam)
    env = np.asarray(env, dtype=np.float64)
    img = np.empty((len(o), 3))
    counters = np.zeros(2, dtype=np.int64)

    def run(sel):
        batch = march(occ, rad, RayBatch(o[sel], d[sel]), step, env)
        W = batch.weights()
        wa = W * np.where(batch.valid, batch.alpha, 0.0)
        img[sel] = np.einsum("rm,rmc->rc", wa,
                             np.where(batch.valid[..., None], batch.color, 0.0))
        n_cand = int(batch.candidate.sum())
        return n_cand, n_cand

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as ex:
            for a_ev, c_ev in ex.map(run, _chunked(len(o), chunk)):
                counters += (a_ev, c_ev)
    else:
        for sel in _chunked(len(o), chunk):
            a_ev, c_ev = run(sel)
            counters += (a_ev, c_ev)
    stats = RenderStats(len(o), int(counters[0]), int(counters[1]))
    return img.reshape(cam.height, cam.width, 3), stats


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """-10 log10(MSE) on [0,1] images; equal images report the 99 dB cap."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def level_set_stability(occ, rad, cam, env, step, levels):
    """Pairwise PSNR matrix of surface renders across level thresholds."""
    levels = list(levels)
    renders = [render_surface(occ, rad, cam, env, step, threshold=lv)[0]
               for lv in levels]
    n = len(levels)
    mat = np.full((n, n), PSNR_CAP_DB)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = psnr(renders[i], renders[j])
    return mat


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray    # (V, 3) float
    triangles: np.ndarray   # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or
                                    self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)

    def euler_characteristic(self) -> int:
        edges = np.concatenate([self.triangles[:, [0, 1]],
                                self.triangles[:, [1, 2]],
                                self.triangles[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        n_edges = len(np.unique(edges, axis=0))
        used = np.unique(self.triangles)
        return int(len(used) - n_edges + len(self.triangles))


def extract_mesh(occ: OccupancyField, level: float = 0.5) -> Mesh:
    """Marching cubes on decoded alpha at the grid vertices.

    Degenerate zero-area triangles are dropped; an all-empty (or all-full)
    field yields an empty mesh.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    vol = occ.decoded_vertex_alphas()
    if vol.min() >= level or vol.max() < level:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(
        vol, level=level, spacing=tuple(occ.cell_size))
    verts = verts + occ.bounds.lo
    mesh = Mesh(verts, faces)
    areas = mesh.triangle_areas()
    keep = areas > 0.0
    if not keep.all():
        mesh = Mesh(mesh.vertices, mesh.triangles[keep])
    return mesh


def reference_mesh_from_scene(scene, bounds, resolution: int = 128) -> Mesh:
    """Ground-truth mesh: marching cubes on the scene's exact signed distance."""
    axes = [np.linspace(bounds.lo[a], bounds.hi[a], resolution + 1)
            for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1)
    vol = scene.sdf(pts)
    if vol.min() >= 0.0 or vol.max() < 0.0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = tuple((bounds.hi - bounds.lo) / resolution)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=spacing)
    return Mesh(verts + bounds.lo, faces)


def sample_mesh_surface(mesh: Mesh, n_points: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted surface samples, shape (n_points, 3)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(probs), size=n_points, p=probs)
    u = rng.random(n_points)
    v = rng.random(n_points)
    su = np.sqrt(u)
    b0 = 1.0 - su
    b1 = su * (1.0 - v)
    b2 = su * v
    t = mesh.triangles[tri]
    pts = (b0[:, None] * mesh.vertices[t[:, 0]]
           + b1[:, None] * mesh.vertices[t[:, 1]]
           + b2[:, None] * mesh.vertices[t[:, 2]])
    return pts


def chamfer(mesh_a: Mesh, mesh_b: Mesh, n_points: int = 100_000,
            seed: int = 0) -> float:
    """Symmetric mean nearest-point distance over surface samples.

    Both meshes are sampled with the same seed, so identical meshes report
    exactly zero.
    """
    if mesh_a.is_empty or mesh_b.is_empty:
        raise ValueError("chamfer distance requires non-empty meshes")
    pa = sample_mesh_surface(mesh_a, n_points, np.random.default_rng(seed))
    pb = sample_mesh_surface(mesh_b, n_points, np.random.default_rng(seed))
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def save_image(path, img: np.ndarray, float_dump: bool = True):
    """8-bit PNG plus a lossless float32 .npy next to it."""
    path = Path(path)
    u8 = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)
    if float_dump:
        np.save(path.with_suffix(".npy"), np.asarray(img, dtype=np.float32))


def save_mesh_obj(path, mesh: Mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write("v %.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        for t in mesh.triangles:
            f.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


def load_mesh_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return Mesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_mesh_ply(path, mesh: Mesh):
    """Binary little-endian PLY (float32 vertices, int32 face indices)."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(mesh.vertices.astype("<f4").tobytes())
        tri = mesh.triangles.astype("<i4")
        counts = np.full((len(tri), 1), 3, dtype=np.uint8)
        rows = b"".join(c.tobytes() + t.tobytes() for c, t in zip(counts, tri))
        f.write(rows)


def load_mesh_ply(path) -> Mesh:
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    verts = np.frombuffer(data, dtype="<f4", count=nv * 3, offset=end)
    off = end + nv * 12
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        cnt = data[off]
        off += 1
        faces[i] = np.frombuffer(data, dtype="<i4", count=cnt, offset=off)[:3]
        off += 4 * cnt
    return Mesh(verts.reshape(-1, 3).astype(np.float64), faces)
