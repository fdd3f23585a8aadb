"""Dense occupancy and radiance grids with trilinear interpolation and
hand-written gradient accumulation.

Both fields store one value (or coefficient vector) per grid *vertex* of a
``resolution``-cell lattice over an axis-aligned box. Occupancy is kept as
logits and decoded through a sigmoid so alpha stays in (0, 1) without any
projection step; queries outside the box return alpha = 0 exactly. Radiance
is a per-vertex spherical-harmonic coefficient grid decoded against the view
direction and clamped to [0, 1] per channel (zero gradient in the clamped
region).

Gradient buffers are plain additive accumulators: `reset_grad` zeroes them,
the `scatter_grad_*` ops add into them. Reads are thread-safe; concurrent
scatter is only guaranteed bit-deterministic in single-threaded use.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

# Unnormalized real SH basis, degrees 0..2 (9 terms).
SH_TERMS = {0: 1, 1: 4, 2: 9}

CHECKPOINT_MAGIC = b"GSCK"
FIELD_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(a):
    a = np.asarray(a, dtype=np.float64)
    return np.log(a) - np.log1p(-a)


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Evaluate the SH basis at unit directions, shape (..., n_terms)."""
    if degree not in SH_TERMS:
        raise ValueError(f"unsupported sh degree {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.ones_like(x)]
    if degree >= 1:
        cols += [y, z, x]
    if degree >= 2:
        cols += [x * y, y * z, 3.0 * z * z - 1.0, x * z, x * x - y * y]
    return np.stack(cols, axis=-1)


@dataclass
class Bounds:
    """Axis-aligned box in world units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if not np.all(self.hi > self.lo):
            raise ValueError("bounds must have positive extent on every axis")

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)


@dataclass
class FieldPoint:
    """A query location with a unit view direction."""

    position: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"direction must be unit length, got norm {n}")


class GridCoords:
    """Cached trilinear addressing for a batch of points: linear indices of
    the 8 surrounding vertices, their weights, and the inside-bounds mask."""

    __slots__ = ("idx8", "w8", "inside", "cell")

    def __init__(self, idx8, w8, inside, cell):
        self.idx8 = idx8
        self.w8 = w8
        self.inside = inside
        self.cell = cell


class _Grid:
    """Shared lattice geometry for both field types."""

    def __init__(self, resolution, bounds: Bounds):
        res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
        if np.any(res < 1):
            raise ValueError("resolution must be >= 1 cell per axis")
        self.resolution = res
        self.bounds = bounds
        self.vshape = tuple(int(r) + 1 for r in res)
        self.n_vertices = int(np.prod(self.vshape))
        # strides for linearized vertex index
        self._sx = self.vshape[1] * self.vshape[2]
        self._sy = self.vshape[2]

    @property
    def cell_size(self) -> np.ndarray:
        return self.bounds.extent / self.resolution

    def vertex_positions(self) -> np.ndarray:
        """World positions of all vertices, shape vshape + (3,)."""
        axes = [
            np.linspace(self.bounds.lo[a], self.bounds.hi[a], self.vshape[a])
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def coords(self, points: np.ndarray) -> GridCoords:
        """Trilinear addressing for ``points`` of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        flat = p.reshape(-1, 3)
        n = flat.shape[0]
        inside = ((flat >= self.bounds.lo) & (flat <= self.bounds.hi)) \
            .all(axis=1)
        u = (flat - self.bounds.lo) / self.cell_size
        cell = u.astype(np.int64)    # u >= 0 after the inside test matters
        np.clip(cell, 0, self.resolution - 1, out=cell)
        f = u - cell
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        # corner order: bit 2 -> x, bit 1 -> y, bit 0 -> z
        w8 = np.empty((n, 8))
        yz00 = gy * gz
        yz01 = gy * fz
        yz10 = fy * gz
        yz11 = fy * fz
        w8[:, 0] = gx * yz00
        w8[:, 1] = gx * yz01
        w8[:, 2] = gx * yz10
        w8[:, 3] = gx * yz11
        w8[:, 4] = fx * yz00
        w8[:, 5] = fx * yz01
        w8[:, 6] = fx * yz10
        w8[:, 7] = fx * yz11
        base = cell[:, 0] * self._sx + cell[:, 1] * self._sy + cell[:, 2]
        offs = np.array(
            [dx * self._sx + dy * self._sy + dz
             for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
            dtype=np.int64,
        )
        idx8 = base[:, None] + offs[None, :]
        return GridCoords(idx8, w8, inside, cell)

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(linear cell index, inside mask) for challenge-grid bookkeeping."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inside = self.bounds.contains(p)
        u = (p - self.bounds.lo) / self.cell_size
        cell = np.clip(np.floor(u).astype(np.int64), 0, self.resolution - 1)
        res = self.resolution
        lin = (cell[:, 0] * res[1] + cell[:, 1]) * res[2] + cell[:, 2]
        return lin, inside


class OccupancyField(_Grid):
    """Occupancy-logit grid; alpha(x) = sigmoid(trilinear(logits, x))."""

    def __init__(self, resolution, bounds: Bounds, init_logit: float = 0.0):
        super().__init__(resolution, bounds)
        self.logits = np.full(self.n_vertices, init_logit, dtype=np.float32)
        self.grad = np.zeros(self.n_vertices, dtype=np.float64)

    def reset_grad(self):
        self.grad.fill(0.0)

    def raw_at(self, points, coords: GridCoords | None = None) -> np.ndarray:
        """Pre-sigmoid interpolated logit (0 outside bounds). Test hook for
        exact-stencil checks on the raw interpolant."""
        c = coords if coords is not None else self.coords(points)
        vals = np.einsum(
            "nk,nk->n", self.logits.astype(np.float64)[c.idx8], c.w8
        )
        vals[~c.inside] = 0.0
        shape = np.asarray(points, dtype=np.float64).shape[:-1]
        return vals.reshape(shape)

    def eval_alpha(self, points, coords: GridCoords | None = None) -> np.ndarray:
        """alpha in [0,1] at points of shape (..., 3); 0 outside bounds."""
        c = coords if coords is not None else self.coords(points)
        g = np.einsum("nk,nk->n", self.logits.astype(np.float64)[c.idx8], c.w8)
        a = sigmoid(g)
        a[~c.inside] = 0.0
        shape = np.asarray(points, dtype=np.float64).shape[:-1]
        return a.reshape(shape)

    def scatter_grad_alpha(self, points, dL_dalpha, coords=None, alphas=None):
        """Accumulate d(loss)/d(logit) for dL/dalpha at each point.

        Outside-bounds points are a no-op. `coords`/`alphas` may be passed to
        reuse values cached during the forward pass.
        """
        c = coords if coords is not None else self.coords(points)
        a = alphas
        if a is None:
            a = self.eval_alpha(points, coords=c)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        up = np.asarray(dL_dalpha, dtype=np.float64).reshape(-1)
        chain = up * a * (1.0 - a)
        chain = np.where(c.inside, chain, 0.0)
        contrib = chain[:, None] * c.w8
        self.grad += np.bincount(
            c.idx8.ravel(), weights=contrib.ravel(), minlength=self.n_vertices
        )

    def decoded_vertex_alphas(self) -> np.ndarray:
        return sigmoid(self.logits.astype(np.float64)).reshape(self.vshape)

    def clamp_logits_max(self, max_logit: float):
        np.minimum(self.logits, np.float32(max_logit), out=self.logits)


class RadianceGrid(_Grid):
    """Per-vertex SH coefficient grid decoding to RGB in [0, 1].

    sh_degree 0 reduces to a view-independent RGB grid (basis term 1).
    """

    def __init__(self, resolution, bounds: Bounds, sh_degree: int = 0,
                 init_rgb: float = 0.5):
        super().__init__(resolution, bounds)
        if sh_degree not in SH_TERMS:
            raise ValueError(f"sh_degree must be one of {sorted(SH_TERMS)}")
        self.sh_degree = sh_degree
        self.n_terms = SH_TERMS[sh_degree]
        self.coeffs = np.zeros((self.n_vertices, 3, self.n_terms), dtype=np.float32)
        self.coeffs[:, :, 0] = init_rgb
        self.grad = np.zeros((self.n_vertices, 3, self.n_terms), dtype=np.float64)

    def reset_grad(self):
        self.grad.fill(0.0)

    @staticmethod
    def _check_dirs(dirs) -> np.ndarray:
        d = np.asarray(dirs, dtype=np.float64)
        n = np.linalg.norm(d, axis=-1)
        if np.any(np.abs(n - 1.0) > 1e-6):
            raise ValueError("view directions must be unit length (tol 1e-6)")
        return d

    def _decode(self, coords: GridCoords, basis: np.ndarray):
        if self.n_terms == 1:
            cf = self.coeffs.reshape(-1, 3)
            raw = np.zeros((coords.idx8.shape[0], 3))
            for k in range(8):   # corner-wise gather avoids an (N,8,3) temp
                raw += coords.w8[:, k, None] * cf[coords.idx8[:, k]]
        else:
            cf = self.coeffs.astype(np.float64)[coords.idx8]  # (N, 8, 3, S)
            interp = np.einsum("nkcs,nk->ncs", cf, coords.w8)
            raw = np.einsum("ncs,ns->nc", interp, basis)
        raw[~coords.inside] = 0.0
        return raw

    def eval_color(self, points, dirs, coords: GridCoords | None = None,
                   basis: np.ndarray | None = None) -> np.ndarray:
        """Clamped RGB at (points, unit dirs); zero outside bounds."""
        p = np.asarray(points, dtype=np.float64)
        if basis is None:
            d = self._check_dirs(dirs)
            basis = sh_basis(self.sh_degree, np.broadcast_to(d, p.shape))
        basis = basis.reshape(-1, self.n_terms)
        c = coords if coords is not None else self.coords(p)
        raw = self._decode(c, basis)
        out = np.clip(raw, 0.0, 1.0)
        return out.reshape(p.shape[:-1] + (3,))

    def eval_color_raw(self, points, dirs):
        """(clamped rgb, pre-clamp rgb) - used to cache clamp masks."""
        p = np.asarray(points, dtype=np.float64)
        d = self._check_dirs(dirs)
        basis = sh_basis(self.sh_degree, np.broadcast_to(d, p.shape)).reshape(
            -1, self.n_terms
        )
        c = self.coords(p)
        raw = self._decode(c, basis)
        return np.clip(raw, 0.0, 1.0), raw

    def scatter_grad_color(self, points, dirs, dL_dcolor, coords=None,
                           basis=None, clamp_mask=None):
        """Accumulate d(loss)/d(coeff); channels clamped at 0/1 get zero."""
        p = np.asarray(points, dtype=np.float64)
        if basis is None:
            d = self._check_dirs(dirs)
            basis = sh_basis(self.sh_degree, np.broadcast_to(d, p.shape))
        basis = basis.reshape(-1, self.n_terms)
        c = coords if coords is not None else self.coords(p)
        up = np.asarray(dL_dcolor, dtype=np.float64).reshape(-1, 3)
        if clamp_mask is None:
            raw = self._decode(c, basis)
            clamp_mask = (raw > 0.0) & (raw < 1.0)
        eff = np.where(clamp_mask, up, 0.0)
        eff = np.where(c.inside[:, None], eff, 0.0)
        idx = c.idx8.ravel()
        for ch in range(3):
            for s in range(self.n_terms):
                contrib = (eff[:, ch] * basis[:, s])[:, None] * c.w8
                self.grad[:, ch, s] += np.bincount(
                    idx, weights=contrib.ravel(), minlength=self.n_vertices
                )


def save_fields(path, occ: OccupancyField, rad: RadianceGrid,
                trailer: bytes = b"", version: int = FIELD_VERSION):
    """Write the versioned binary checkpoint: header, f32 logits, f32 coeffs.

    `trailer` lets the training module append optimizer state (version 2).
    """
    if tuple(occ.resolution) != tuple(rad.resolution):
        raise ValueError("occupancy and radiance grids must share a resolution")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", version))
        f.write(struct.pack("<3I", *[int(r) for r in occ.resolution]))
        f.write(struct.pack("<6d", *occ.bounds.lo, *occ.bounds.hi))
        f.write(struct.pack("<I", rad.sh_degree))
        f.write(occ.logits.astype("<f4").tobytes())
        f.write(rad.coeffs.astype("<f4").tobytes())
        f.write(trailer)


def load_fields(path):
    """Read a checkpoint; returns (occ, rad, version, trailer bytes)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a field checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", data, off); off += 4
    res = struct.unpack_from("<3I", data, off); off += 12
    b = struct.unpack_from("<6d", data, off); off += 48
    (sh_degree,) = struct.unpack_from("<I", data, off); off += 4
    bounds = Bounds(np.array(b[:3]), np.array(b[3:]))
    occ = OccupancyField(res, bounds)
    rad = RadianceGrid(res, bounds, sh_degree=sh_degree)
    n = occ.n_vertices
    occ.logits = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy()
    off += 4 * n
    ncf = n * 3 * rad.n_terms
    rad.coeffs = (
        np.frombuffer(data, dtype="<f4", count=ncf, offset=off)
        .copy()
        .reshape(n, 3, rad.n_terms)
    )
    off += 4 * ncf
    return occ, rad, version, data[off:]
