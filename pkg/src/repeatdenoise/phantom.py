"""Synthetic layered volumes, random diffeomorphic motion and noise.

Layers stack along y (depth within a B-scan); z is the slow B-scan axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import FieldKind, VectorField3D, Volume3D, _smooth_array, warp
from .registration import exponentiate

__all__ = [
    "PhantomSpec",
    "MotionSpec",
    "NoiseSpec",
    "layer_boundaries",
    "generate_clean",
    "random_diffeo",
    "motion_velocities",
    "add_noise",
    "deformed_copies",
    "make_repeats",
]

DEFAULT_INTENSITIES = (0.1, 0.65, 0.35, 0.85, 0.25, 0.55)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (96, 96, 32)
    spacing: tuple = (1.0, 1.0, 2.0)
    layers: int = 6
    intensities: tuple | None = None  # one per layer; None -> DEFAULT_INTENSITIES cycled
    boundary_amplitude: float = 3.0  # voxels, per sinusoidal component
    boundary_frequency: float = 3.0  # max cycles across the x/z extent
    boundary_components: int = 3
    vessel_count: int = 20
    vessel_size: float = 3.0  # voxels, in-plane semi-axis
    vessel_intensity: float = 0.05
    edge_width: float = 0.5  # voxels, logistic transition scale
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        ints = self.layer_intensities()
        if any(not 0.0 <= x <= 1.0 for x in ints) or not 0.0 <= self.vessel_intensity <= 1.0:
            raise ValueError("intensities must lie in [0, 1]")

    def layer_intensities(self):
        if self.intensities is not None:
            if len(self.intensities) != self.layers:
                raise ValueError("need one intensity per layer")
            return tuple(float(x) for x in self.intensities)
        return tuple(DEFAULT_INTENSITIES[i % len(DEFAULT_INTENSITIES)] for i in range(self.layers))


@dataclass(frozen=True)
class MotionSpec:
    amplitude: float = 3.0  # max velocity magnitude, voxels
    smoothness: float = 8.0  # Gaussian sigma, voxels
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if not self.smoothness > 0:
            raise ValueError("smoothness must be > 0")


NOISE_MODELS = ("gaussian", "speckle", "mixed")


@dataclass(frozen=True)
class NoiseSpec:
    model: str = "gaussian"
    sigma: float = 0.1  # additive std
    shape: float = 4.0  # gamma shape k of the multiplicative speckle, mean 1
    seed: int = 0

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise ValueError(f"noise model must be one of {NOISE_MODELS}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not self.shape > 0:
            raise ValueError("speckle shape must be > 0")


def layer_boundaries(spec):
    """Depth (y, voxels) of each of the ``layers - 1`` interfaces, shape (L-1, nx, nz).

    Interfaces sit at evenly spaced base depths and ripple by a sum of
    sinusoids whose total amplitude is capped below half the base gap, which
    keeps them strictly ordered.
    """
    nx, ny, nz = spec.dims
    n_if = spec.layers - 1
    if n_if == 0:
        return np.zeros((0, nx, nz))
    rng = np.random.default_rng([spec.seed, 1])
    gap = ny / spec.layers
    cap = 0.45 * gap
    x = np.arange(nx, dtype=np.float64)[:, None] / nx
    z = np.arange(nz, dtype=np.float64)[None, :] / nz
    out = np.empty((n_if, nx, nz))
    for k in range(n_if):
        surf = np.zeros((nx, nz))
        for _ in range(spec.boundary_components):
            fx, fz = rng.uniform(0.5, spec.boundary_frequency, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            surf += np.sin(2 * np.pi * (fx * x + fz * z) + phase)
        amp = min(spec.boundary_amplitude, cap / spec.boundary_components)
        out[k] = gap * (k + 1) + amp * surf
    return out


def _logistic(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def generate_clean(spec=PhantomSpec()):
    nx, ny, nz = spec.dims
    ints = spec.layer_intensities()
    bounds = layer_boundaries(spec)
    y = np.arange(ny, dtype=np.float64)[None, :, None]
    vol = np.full((nx, ny, nz), ints[0])
    for k in range(spec.layers - 1):
        inside = _logistic((y - bounds[k][:, None, :]) / spec.edge_width)
        vol += (ints[k + 1] - ints[k]) * inside

    if spec.vessel_count > 0 and spec.layers > 1:
        rng = np.random.default_rng([spec.seed, 2])
        grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in spec.dims], indexing="ij")
        for _ in range(spec.vessel_count):
            c = rng.uniform([0.1 * nx, 0.15 * ny, 0.1 * nz], [0.9 * nx, 0.85 * ny, 0.9 * nz])
            r = spec.vessel_size * rng.uniform(0.7, 1.3, size=3) * np.array([1.0, 1.0, 1.5])
            rho = np.sqrt(sum(((g - ci) / ri) ** 2 for g, ci, ri in zip(grid, c, r)))
            mask = _logistic((1.0 - rho) * r.min() / spec.edge_width)
            vol = vol * (1 - mask) + spec.vessel_intensity * mask
    return Volume3D(np.clip(vol, 0.0, 1.0).astype(np.float32), spec.spacing)


def random_diffeo(dims, spec=MotionSpec(), spacing=(1.0, 1.0, 1.0), rng=None):
    """Smoothed white-noise velocity field with max magnitude ``amplitude`` voxels."""
    dims = tuple(int(n) for n in dims)
    sp = np.asarray(spacing, dtype=np.float64)
    if spec.amplitude == 0:
        return VectorField3D(np.zeros(dims + (3,)), spacing, FieldKind.VELOCITY)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    noise = rng.standard_normal(dims + (3,))
    smooth = _smooth_array(noise, np.full(3, spec.smoothness))
    mag = np.sqrt((smooth ** 2).sum(-1)).max()
    v_vox = smooth * (spec.amplitude / mag)
    return VectorField3D(v_vox * sp, spacing, FieldKind.VELOCITY)


def motion_velocities(dims, spacing, n, spec=MotionSpec()):
    """Independent velocity fields for ``n`` repeats (seeded per repeat)."""
    return [
        random_diffeo(dims, spec, spacing, rng=np.random.default_rng([spec.seed, i]))
        for i in range(n)
    ]


def add_noise(vol, spec=NoiseSpec(), rng=None):
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    data = np.asarray(vol.data, dtype=np.float64)
    if spec.model in ("speckle", "mixed"):
        data = data * rng.gamma(spec.shape, 1.0 / spec.shape, size=data.shape)
    if spec.model in ("gaussian", "mixed") and spec.sigma > 0:
        data = data + rng.normal(0.0, spec.sigma, size=data.shape)
    return Volume3D(data.astype(np.float32), vol.spacing)


def deformed_copies(clean, n, motion=MotionSpec()):
    """Noise-free repeats ``warp(clean, exp(v_i))`` and their fields ``exp(-v_i)``."""
    moved, truth = [], []
    for v in motion_velocities(clean.dims, clean.spacing, n, motion):
        if motion.amplitude == 0:
            moved.append(clean.copy())
            truth.append(VectorField3D.zeros(clean.dims, clean.spacing))
        else:
            moved.append(warp(clean, exponentiate(v)))
            truth.append(exponentiate(VectorField3D(-v.data, v.spacing, FieldKind.VELOCITY)))
    return moved, truth


def make_repeats(clean, n, motion=MotionSpec(), noise=NoiseSpec()):
    """Deform and corrupt ``n`` copies of ``clean``.

    Repeat ``i`` is ``noise(warp(clean, exp(v_i)))``.  The second list
    holds ``exp(-v_i)``, the displacement that registers repeat ``i`` back
    onto ``clean`` (the target a registration ``(clean, repeat_i)`` should
    recover).
    """
    moved, truth = deformed_copies(clean, n, motion)
    repeats = []
    for i, m in enumerate(moved):
        rng = np.random.default_rng([noise.seed, 1000 + i])
        repeats.append(add_noise(m, noise, rng) if _noisy(noise) else m)
    return repeats, truth


def _noisy(spec):
    return spec.model != "gaussian" or spec.sigma > 0
