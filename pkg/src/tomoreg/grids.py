"""Regular-grid volumes, displacement fields, interpolation and warping.

Array conventions used across the package:

* scalar volumes are indexed ``data[x, y, z]`` with ``dims = (W, H, D)``;
* vector fields append a trailing component axis, ``data[x, y, z, c]``;
* ``spacing`` and ``origin`` are world millimeters and voxel ``(i, j, k)``
  is centered at ``origin + (i * sx, j * sy, k * sz)``;
* displacement values are world millimeters, so fields move points between
  grids with different (anisotropic) spacings without rescaling;
* interpolation uses a zero-padding convention: contributions from corner
  voxels outside the grid are zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# fractional coordinates this close to a lattice point snap onto it, so
# grid-aligned sampling reproduces stored voxel values bit for bit
_ALIGN_EPS = 1e-9


def _tuple3(values, kind):
    t = tuple(kind(v) for v in values)
    if len(t) != 3:
        raise ValueError(f"expected 3 entries, got {len(t)}")
    return t


# ---------------------------------------------------------------------------
# grid description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Voxel lattice: counts, mm spacing and world position of voxel (0,0,0)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", _tuple3(self.dims, int))
        object.__setattr__(self, "spacing", _tuple3(self.spacing, float))
        object.__setattr__(self, "origin", _tuple3(self.origin, float))
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be >= 1 per axis, got {self.dims}")
        if any(not np.isfinite(s) or s <= 0.0 for s in self.spacing):
            raise ValueError(f"spacing must be positive and finite, got {self.spacing}")
        if any(not np.isfinite(o) for o in self.origin):
            raise ValueError(f"origin must be finite, got {self.origin}")

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (W, H, D, 3)."""
        axes = [
            self.origin[a] + self.spacing[a] * np.arange(self.dims[a], dtype=np.float64)
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def world_to_voxel(self, pts: np.ndarray) -> np.ndarray:
        """Continuous voxel coordinates of world points (..., 3)."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """True for points inside the voxel-center extent of the grid."""
        g = self.world_to_voxel(np.atleast_2d(pts))
        hi = np.asarray(self.dims, dtype=np.float64) - 1.0
        return np.all((g >= 0.0) & (g <= hi), axis=-1)


def _validate_grid_payload(obj, expected_ndim: int):
    grid = GridSpec(obj.dims, obj.spacing, obj.origin)  # reuse grid validation
    data = np.asarray(obj.data)
    if data.ndim != expected_ndim:
        raise ValueError(f"data must have {expected_ndim} axes, got {data.ndim}")
    if tuple(data.shape[:3]) != grid.dims:
        raise ValueError(f"data shape {data.shape[:3]} does not match dims {grid.dims}")
    if not np.issubdtype(data.dtype, np.floating):
        raise ValueError(f"data must be a float array, got dtype {data.dtype}")
    if not np.all(np.isfinite(data)):
        raise ValueError("data contains non-finite values")
    return grid, data


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------

@dataclass
class Image3D:
    """Scalar intensity volume on a regular grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        grid, data = _validate_grid_payload(self, 3)
        self.dims, self.spacing, self.origin = grid.dims, grid.spacing, grid.origin
        self.data = data

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.origin)


@dataclass
class Mask3D:
    """Binary volume; voxel values are exactly 0 or 1."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        grid, data = _validate_grid_payload(self, 3)
        if not np.all((data == 0.0) | (data == 1.0)):
            raise ValueError("mask values must be exactly 0 or 1")
        self.dims, self.spacing, self.origin = grid.dims, grid.spacing, grid.origin
        self.data = data

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.origin)


@dataclass
class DisplacementField:
    """Per-voxel world-mm displacement vectors, data[x, y, z, c]."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        grid, data = _validate_grid_payload(self, 4)
        if data.shape[3] != 3:
            raise ValueError(f"displacement data must have 3 components, got {data.shape[3]}")
        self.dims, self.spacing, self.origin = grid.dims, grid.spacing, grid.origin
        self.data = data

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing, self.origin)


def zero_displacement(grid: GridSpec, dtype=np.float64) -> DisplacementField:
    return DisplacementField(
        grid.dims, grid.spacing, grid.origin,
        np.zeros(grid.dims + (3,), dtype=dtype),
    )


@dataclass
class Landmarks:
    """Labelled world-mm points; ids are unique integers."""

    ids: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.ids.shape[0] != self.points.shape[0]:
            raise ValueError("ids and points disagree in length")
        if np.unique(self.ids).size != self.ids.size:
            raise ValueError("landmark ids must be unique")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")

    def __len__(self) -> int:
        return int(self.ids.size)


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def _snap_fraction(g: np.ndarray):
    """Split continuous voxel coords into base index and snapped fraction."""
    i0 = np.floor(g)
    f = g - i0
    hi = f > 1.0 - _ALIGN_EPS
    i0 = (i0 + hi).astype(np.int64)
    f = np.where(hi, 0.0, f)
    f = np.where(f < _ALIGN_EPS, 0.0, f)
    return i0, f


def _corner(volc: np.ndarray, i0: np.ndarray, dx: int, dy: int, dz: int) -> np.ndarray:
    W, H, D = volc.shape[:3]
    ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
    ok = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H) & (iz >= 0) & (iz < D)
    vals = volc[np.clip(ix, 0, W - 1), np.clip(iy, 0, H - 1), np.clip(iz, 0, D - 1)]
    return np.where(ok[:, None], vals, 0.0)


def sample_trilinear(data: np.ndarray, g: np.ndarray, with_gradient: bool = False):
    """Trilinear sampling of (W,H,D) or (W,H,D,C) data at voxel coords g (n,3).

    Returns values (n,) or (n,C); with ``with_gradient`` also the exact
    spatial derivative of the interpolant in voxel units, (n,3) or (n,3,C).
    Corners outside the grid contribute zero.
    """
    scalar = data.ndim == 3
    volc = data[..., None] if scalar else data
    i0, f = _snap_fraction(np.asarray(g, dtype=np.float64))

    c000 = _corner(volc, i0, 0, 0, 0)
    c100 = _corner(volc, i0, 1, 0, 0)
    c010 = _corner(volc, i0, 0, 1, 0)
    c110 = _corner(volc, i0, 1, 1, 0)
    c001 = _corner(volc, i0, 0, 0, 1)
    c101 = _corner(volc, i0, 1, 0, 1)
    c011 = _corner(volc, i0, 0, 1, 1)
    c111 = _corner(volc, i0, 1, 1, 1)

    fx, fy, fz = (f[:, a][:, None] for a in range(3))
    gx0, gx1 = 1.0 - fx, fx
    gy0, gy1 = 1.0 - fy, fy
    gz0, gz1 = 1.0 - fz, fz

    lo = (c000 * gx0 + c100 * gx1) * gy0 + (c010 * gx0 + c110 * gx1) * gy1
    hi = (c001 * gx0 + c101 * gx1) * gy0 + (c011 * gx0 + c111 * gx1) * gy1
    vals = lo * gz0 + hi * gz1

    if not with_gradient:
        return vals[:, 0] if scalar else vals

    dx = ((c100 - c000) * gy0 + (c110 - c010) * gy1) * gz0 \
        + ((c101 - c001) * gy0 + (c111 - c011) * gy1) * gz1
    dy = ((c010 - c000) * gx0 + (c110 - c100) * gx1) * gz0 \
        + ((c011 - c001) * gx0 + (c111 - c101) * gx1) * gz1
    dz = hi - lo
    grad = np.stack([dx, dy, dz], axis=1)
    if scalar:
        return vals[:, 0], grad[:, :, 0]
    return vals, grad


def sample_nearest(data: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Nearest-voxel sampling with zeros outside the grid (ties round up)."""
    scalar = data.ndim == 3
    volc = data[..., None] if scalar else data
    W, H, D = volc.shape[:3]
    idx = np.floor(np.asarray(g, dtype=np.float64) + 0.5).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < np.array([W, H, D])), axis=1)
    ix = np.clip(idx[:, 0], 0, W - 1)
    iy = np.clip(idx[:, 1], 0, H - 1)
    iz = np.clip(idx[:, 2], 0, D - 1)
    vals = np.where(ok[:, None], volc[ix, iy, iz], 0.0)
    return vals[:, 0] if scalar else vals


def trilinear_sample(vol: Image3D, p) -> float:
    """Interpolated intensity at one world-mm point; 0 outside the grid."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.shape != (3,):
        raise ValueError(f"point must have 3 coordinates, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("sample point must be finite")
    g = vol.grid.world_to_voxel(p[None, :])
    return float(sample_trilinear(vol.data, g)[0])


def sample_displacement(u: DisplacementField, pts: np.ndarray) -> np.ndarray:
    """Trilinear displacement vectors at world points (n, 3) -> (n, 3)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    g = u.grid.world_to_voxel(pts)
    return sample_trilinear(u.data, g)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def _warp_coords(src_grid: GridSpec, u: DisplacementField) -> np.ndarray:
    """Continuous source-voxel coords of x + u(x) for every target voxel."""
    W, H, D = u.dims
    sp = np.asarray(src_grid.spacing)
    base = np.stack(np.meshgrid(
        np.arange(W, dtype=np.float64),
        np.arange(H, dtype=np.float64),
        np.arange(D, dtype=np.float64), indexing="ij"), axis=-1)
    if src_grid == u.grid:
        # index-space arithmetic keeps grid-aligned samples exact for u == 0
        g = base + u.data.astype(np.float64) / sp
    else:
        pts = u.grid.voxel_centers() + u.data.astype(np.float64)
        g = (pts - np.asarray(src_grid.origin)) / sp
    return g.reshape(-1, 3)


def warp_image(src, u: DisplacementField, interp: str = "trilinear"):
    """Resample ``src`` at x + u(x) over the grid of ``u``.

    Masks must be warped with ``interp="nearest"`` so values stay binary.
    """
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {interp!r}")
    if isinstance(src, Mask3D) and interp != "nearest":
        raise ValueError("Mask3D must be warped with nearest-neighbor interpolation")
    g = _warp_coords(src.grid, u)
    if interp == "trilinear":
        vals = sample_trilinear(src.data.astype(np.float64, copy=False), g)
    else:
        vals = sample_nearest(src.data.astype(np.float64, copy=False), g)
    out = vals.reshape(u.dims).astype(src.data.dtype, copy=False)
    cls = Mask3D if isinstance(src, Mask3D) else Image3D
    return cls(u.dims, u.spacing, u.origin, out)


def warp_scalar_with_gradient(data: np.ndarray, src_grid: GridSpec,
                              u: DisplacementField):
    """Warped values plus d(warped)/d(displacement) in 1/mm units.

    The gradient is the exact spatial derivative of the trilinear
    interpolant at the sample points, so finite differences of downstream
    losses agree with chain-rule gradients at tight tolerance.
    """
    g = _warp_coords(src_grid, u)
    vals, grad = sample_trilinear(data, g, with_gradient=True)
    grad = grad / np.asarray(src_grid.spacing)[None, :]
    return vals.reshape(u.dims), grad.reshape(u.dims + (3,))


# ---------------------------------------------------------------------------
# differential quantities
# ---------------------------------------------------------------------------

def image_gradient(vol: Image3D) -> np.ndarray:
    """Spatial gradient in 1/mm: central differences inside, one-sided at faces."""
    gx, gy, gz = np.gradient(vol.data.astype(np.float64, copy=False), *vol.spacing)
    return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class JacobianStats:
    pct_negative: float
    min_det: float


def jacobian_stats(u: DisplacementField) -> JacobianStats:
    """det(I + grad u) statistics over interior voxels (central differences)."""
    W, H, D = u.dims
    if min(W, H, D) < 3:
        raise ValueError("jacobian stats need at least 3 voxels per axis")
    data = u.data.astype(np.float64, copy=False)
    sp = u.spacing
    core = (slice(1, -1), slice(1, -1), slice(1, -1))

    J = np.empty((W - 2, H - 2, D - 2, 3, 3), dtype=np.float64)
    for d, ax in enumerate(range(3)):
        plus = [slice(1, -1)] * 3
        minus = [slice(1, -1)] * 3
        plus[ax] = slice(2, None)
        minus[ax] = slice(0, -2)
        diff = (data[tuple(plus)] - data[tuple(minus)]) / (2.0 * sp[d])
        J[..., :, d] = diff
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0
    J[..., 2, 2] += 1.0

    a, b, c = J[..., 0, 0], J[..., 0, 1], J[..., 0, 2]
    d_, e, f = J[..., 1, 0], J[..., 1, 1], J[..., 1, 2]
    g, h, i = J[..., 2, 0], J[..., 2, 1], J[..., 2, 2]
    det = a * (e * i - f * h) - b * (d_ * i - f * g) + c * (d_ * h - e * g)

    pct = 100.0 * float(np.count_nonzero(det < 0.0)) / det.size
    return JacobianStats(pct_negative=pct, min_det=float(det.min()))
