"""Grid types and the resampling primitives shared by every stage.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x.  Physical point
``p`` maps to fractional index ``p / spacing`` (voxel 0 centred at the
origin).  Files use x-fastest linear order, i.e. Fortran ravel order.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import _kernels

__all__ = [
    "FieldKind",
    "Volume3D",
    "VectorField3D",
    "Slice2D",
    "trilinear_sample",
    "warp",
    "compose",
    "gaussian_smooth",
    "resample",
    "downsample2",
    "build_pyramid",
    "physical_center",
]


def _as_float(data):
    data = np.asarray(data)
    if data.dtype not in (np.float32, np.float64):
        data = data.astype(np.float32)
    return data


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    return spacing


@dataclass
class Volume3D:
    """Scalar grid of shape ``(nx, ny, nz)`` with physical voxel spacing."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = _as_float(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"Volume3D needs a 3D array, got shape {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume3D data contains NaN or Inf")

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)

    def copy(self):
        return Volume3D(self.data.copy(), self.spacing)

    def slice(self, z, subject=0, repeat=0):
        return Slice2D(self.data[:, :, z].copy(), subject=subject, repeat=repeat, z=z)


class FieldKind(enum.Enum):
    VELOCITY = "Velocity"
    DISPLACEMENT = "Displacement"


@dataclass
class VectorField3D:
    """Per-voxel 3-vectors in physical units, shape ``(nx, ny, nz, 3)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: FieldKind = FieldKind.DISPLACEMENT

    def __post_init__(self):
        self.data = _as_float(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ValueError(f"VectorField3D needs shape (nx, ny, nz, 3), got {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        self.kind = FieldKind(self.kind)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("VectorField3D data contains NaN or Inf")

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape[:3])

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0), kind=FieldKind.DISPLACEMENT):
        return cls(np.zeros(tuple(dims) + (3,), dtype=np.float64), spacing, kind)

    def max_voxel_norm(self):
        """Largest vector magnitude measured in voxels of this grid."""
        v = self.data / np.asarray(self.spacing)
        return float(np.sqrt((v.astype(np.float64) ** 2).sum(-1)).max())


@dataclass
class Slice2D:
    """A 2D ``(nx, ny)`` image at fixed z, tagged with where it came from."""

    data: np.ndarray
    subject: int = 0
    repeat: int = 0
    z: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = _as_float(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"Slice2D needs a 2D array, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Slice2D data contains NaN or Inf")

    @property
    def dims(self):
        return tuple(int(n) for n in self.data.shape)


# ---------------------------------------------------------------------------
# trilinear interpolation on raw arrays


@functools.lru_cache(maxsize=16)
def _index_grid(dims):
    grid = np.stack(
        np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), axis=-1
    )
    grid.flags.writeable = False
    return grid


def _as4d(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return arr if arr.ndim == 4 else arr[..., None]


def _sample(arr, coords, with_grad=False):
    """Trilinear interpolation of ``arr`` at fractional index ``coords``.

    ``arr`` is ``(nx, ny, nz)`` or ``(nx, ny, nz, C)``; ``coords`` has a
    trailing axis of length 3.  Coordinates are clamped to the grid, so the
    gradient (d value / d index) is zero along clamped axes.
    """
    chan = np.shape(arr)[3:]
    coords = np.asarray(coords, dtype=np.float64)
    lead = coords.shape[:-1]
    out, grad = _kernels.sample_points(_as4d(arr), np.ascontiguousarray(coords.reshape(-1, 3)), with_grad)
    out = out.reshape(lead + chan)
    if not with_grad:
        return out
    return out, grad.reshape(lead + chan + (3,))


def _sample_displaced(arr, disp, spacing, with_grad=False):
    """Sample ``arr`` at ``x + disp(x)`` for each voxel ``x`` of ``disp`` (physical units)."""
    chan = np.shape(arr)[3:]
    inv = 1.0 / np.asarray(spacing, dtype=np.float64)
    out, grad = _kernels.sample_displaced(
        _as4d(arr), np.ascontiguousarray(disp, dtype=np.float64), inv, with_grad
    )
    lead = out.shape[:3]
    out = out.reshape(lead + chan)
    if not with_grad:
        return out
    return out, grad.reshape(lead + chan + (3,))


def _warp_array(arr, disp, spacing):
    """Pull-back ``arr`` through a physical displacement array."""
    return _sample_displaced(arr, disp, spacing)


def _compose_arrays(d1, d2, spacing):
    """Displacement of x -> x + d2(x) followed by d1."""
    return d2 + _sample_displaced(d1, d2, spacing)


def physical_center(dims, spacing):
    return (np.asarray(dims, dtype=np.float64) - 1.0) * np.asarray(spacing) / 2.0


def trilinear_sample(vol, p):
    """Interpolate ``vol`` at physical point(s) ``p``.

    Returns a float for a single point, else an array of shape ``p.shape[:-1]``.
    Points outside the grid take clamp-to-edge values.
    """
    p = np.asarray(p, dtype=np.float64)
    arr = vol.data
    out = _sample(arr.astype(np.float64, copy=False), p / np.asarray(vol.spacing))
    return float(out) if p.ndim == 1 else out


def _require_displacement(disp):
    if not isinstance(disp, VectorField3D) or disp.kind is not FieldKind.DISPLACEMENT:
        raise ValueError("expected a VectorField3D of kind Displacement")


def warp(vol, disp):
    """Resample ``vol`` at ``x + disp(x)`` for every voxel ``x``."""
    _require_displacement(disp)
    if vol.dims != disp.dims:
        raise ValueError(f"dimension mismatch: volume {vol.dims} vs field {disp.dims}")
    if not np.allclose(vol.spacing, disp.spacing):
        raise ValueError(f"spacing mismatch: volume {vol.spacing} vs field {disp.spacing}")
    out = _warp_array(vol.data.astype(np.float64, copy=False), disp.data.astype(np.float64, copy=False), vol.spacing)
    return Volume3D(out.astype(vol.data.dtype), vol.spacing)


def compose(d1, d2):
    """Compose displacements: ``d(x) = d2(x) + d1(x + d2(x))``."""
    _require_displacement(d1)
    _require_displacement(d2)
    if d1.dims != d2.dims:
        raise ValueError(f"dimension mismatch: {d1.dims} vs {d2.dims}")
    out = _compose_arrays(d1.data.astype(np.float64), d2.data.astype(np.float64), d1.spacing)
    return VectorField3D(out, d1.spacing, FieldKind.DISPLACEMENT)


# ---------------------------------------------------------------------------
# smoothing and resampling


def gaussian_kernel1d(sigma_vox):
    """Normalised Gaussian taps over radius ``ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma_vox))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def _smooth_array(arr, sigma_vox):
    """Separable truncated Gaussian over the first three axes.

    Near borders the taps that fall off the grid are dropped and the rest
    re-summed to one.
    """
    out = np.asarray(arr, dtype=np.float64)
    for axis, s in enumerate(sigma_vox):
        if s <= 0:
            continue
        k = gaussian_kernel1d(s)
        n = out.shape[axis]
        norm = ndimage.correlate1d(np.ones(n), k, mode="constant", cval=0.0)
        out = ndimage.correlate1d(out, k, axis=axis, mode="constant", cval=0.0)
        shape = [1] * out.ndim
        shape[axis] = n
        out = out / norm.reshape(shape)
    return out


def gaussian_smooth(vol, sigma_phys):
    """Smooth a volume (or vector field) with per-axis physical widths."""
    sigma_phys = np.broadcast_to(np.asarray(sigma_phys, dtype=np.float64), (3,))
    if np.any(sigma_phys < 0):
        raise ValueError("sigma must be non-negative")
    sigma_vox = sigma_phys / np.asarray(vol.spacing)
    if not np.any(sigma_vox > 0):
        return type(vol)(**{**vol.__dict__, "data": vol.data.copy()})
    out = _smooth_array(vol.data, sigma_vox).astype(vol.data.dtype)
    return type(vol)(**{**vol.__dict__, "data": out})


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def _resample_array(arr, new_dims):
    """Cell-centred trilinear resampling onto a grid with the same extent."""
    dims = arr.shape[:3]
    if tuple(new_dims) == tuple(dims):
        return np.array(arr, dtype=np.float64)
    axes = [
        (np.arange(m, dtype=np.float64) + 0.5) * (n / m) - 0.5 for n, m in zip(dims, new_dims)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return _sample(np.asarray(arr, dtype=np.float64), coords)


def resample(vol, new_dims):
    """Resample onto ``new_dims`` voxels, keeping the physical extent."""
    new_dims = tuple(int(m) for m in new_dims)
    spacing = tuple(s * n / m for s, n, m in zip(vol.spacing, vol.dims, new_dims))
    out = _resample_array(vol.data, new_dims).astype(vol.data.dtype)
    return type(vol)(**{**vol.__dict__, "data": out, "spacing": spacing})


def level_dims(dims, scale):
    new = tuple(_round_half_up(n * scale) for n in dims)
    if min(new) < 2:
        raise ValueError(f"scale {scale} reduces dims {tuple(dims)} to {new}; need >= 2 per axis")
    return new


def _pyramid_level(vol, scale):
    sigma_vox = 0.5 / scale
    smoothed = gaussian_smooth(vol, [sigma_vox * s for s in vol.spacing])
    return resample(smoothed, level_dims(vol.dims, scale))


def build_pyramid(vol, levels):
    """Smoothed, resampled copies of ``vol`` at each scale (coarse first).

    Each level is blurred with sigma ``0.5 / scale`` voxels before
    trilinear resampling to ``round(dim * scale)``.
    """
    levels = [float(s) for s in levels]
    if any(not 0 < s <= 1 for s in levels):
        raise ValueError(f"scale factors must lie in (0, 1], got {levels}")
    if levels != sorted(levels):
        raise ValueError(f"levels must be sorted coarse to fine, got {levels}")
    return [_pyramid_level(vol, s) for s in levels]


def downsample2(vol):
    return _pyramid_level(vol, 0.5)
