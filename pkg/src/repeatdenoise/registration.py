"""Affine and diffeomorphic (stationary velocity field) registration.

The similarity is local normalised cross-correlation (LNCC).  Nonlinear
deformations are parameterised by a stationary velocity ``v`` and realised
as ``exp(v)`` by scaling and squaring, so every returned warp is invertible
by construction; a positive Jacobian determinant is still checked before a
result is handed back.

Convention: a displacement ``d`` returned by ``register_*(fixed, moving)``
satisfies ``warp(moving, d) ~ fixed``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import (
    FieldKind,
    VectorField3D,
    Volume3D,
    _compose_arrays,
    _index_grid,
    _resample_array,
    _sample_displaced,
    _smooth_array,
    build_pyramid,
    physical_center,
)

log = logging.getLogger(__name__)

__all__ = [
    "RegistrationError",
    "RegistrationParams",
    "AffineTransform",
    "DiffeoResult",
    "lncc",
    "lncc_gradient",
    "exponentiate",
    "default_squaring_steps",
    "jacobian_determinant",
    "register_affine",
    "register_diffeo",
]

VARIANCE_FLOOR = 1e-10
NORMALIZE_PERCENTILE = 99.0
# per-window gradient scale below which updates are treated as roundoff
GRADIENT_FLOOR = 1e-8


class RegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegistrationParams:
    levels: tuple = (1 / 6, 1 / 4, 1 / 2, 1.0)
    iters_per_level: tuple = (50, 25, 10, 10)
    lncc_radius: int = 3
    step_size: float | None = None  # physical; None -> 0.25 * min level spacing
    field_smoothing_sigma: float = 1.5  # voxels
    squaring_steps: int | None = None  # None -> smallest N >= 4 with max|v| / 2^N < 0.5 voxel

    def __post_init__(self):
        levels = tuple(float(s) for s in self.levels)
        iters = tuple(int(n) for n in self.iters_per_level)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "iters_per_level", iters)
        if any(b <= a for a, b in zip(levels, levels[1:])) or levels[-1] != 1.0:
            raise ValueError(f"levels must be strictly increasing and end at 1, got {levels}")
        if levels[0] <= 0:
            raise ValueError("levels must be positive")
        if len(iters) != len(levels):
            raise ValueError("iters_per_level must have one entry per level")
        if self.lncc_radius < 1:
            raise ValueError("lncc_radius must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.field_smoothing_sigma < 0:
            raise ValueError("field_smoothing_sigma must be >= 0")
        if self.squaring_steps is not None and self.squaring_steps < 0:
            raise ValueError("squaring_steps must be >= 0")


# ---------------------------------------------------------------------------
# LNCC


def _box(x, radius):
    return ndimage.uniform_filter(x, size=2 * radius + 1, mode="constant", cval=0.0)


def _lncc_terms(a, b, radius):
    ones = _box(np.ones_like(a), radius)
    ua, ub = _box(a, radius), _box(b, radius)
    cross = _box(a * b, radius) - ua * ub / ones
    va = _box(a * a, radius) - ua * ua / ones
    vb = _box(b * b, radius) - ub * ub / ones
    valid = (va / ones > VARIANCE_FLOOR) & (vb / ones > VARIANCE_FLOOR)
    return ones, ua, ub, cross, va, vb, valid


def _lncc_value(a, b, radius):
    _, _, _, cross, va, vb, valid = _lncc_terms(a, b, radius)
    cc = np.zeros_like(a)
    cc[valid] = cross[valid] / np.sqrt(va[valid] * vb[valid])
    return float(cc.mean())


def _lncc_image_grad(a, b, radius):
    """LNCC(a, b) and its gradient with respect to every voxel of ``b``.

    Windows are cubes clipped to the grid, so the box operator is symmetric
    and serves as its own adjoint.
    """
    ones, ua, ub, cross, va, vb, valid = _lncc_terms(a, b, radius)
    cc = np.zeros_like(a)
    d_ab = np.zeros_like(a)
    d_b = np.zeros_like(a)
    d_bb = np.zeros_like(a)
    cr, sa, sb = cross[valid], va[valid], vb[valid]
    inv = 1.0 / np.sqrt(sa * sb)
    cc[valid] = cr * inv
    d_ab[valid] = inv
    d_bb[valid] = -0.5 * cr * inv / sb
    d_b[valid] = -ua[valid] / ones[valid] * inv + cr * inv / sb * ub[valid] / ones[valid]
    m = a.size
    grad = (_box(d_ab, radius) * a + _box(d_b, radius) + 2.0 * b * _box(d_bb, radius)) / m
    return float(cc.mean()), grad


def _check_same(a, b):
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")


def lncc(a, b, radius=3):
    """Mean windowed Pearson correlation of two volumes, in [-1, 1]."""
    _check_same(a, b)
    return _lncc_value(np.asarray(a.data, np.float64), np.asarray(b.data, np.float64), radius)


def _similarity_and_disp_grad(fixed, moving, disp, spacing, radius):
    warped, dwarp_didx = _sample_displaced(moving, disp, spacing, with_grad=True)
    value, g_img = _lncc_image_grad(fixed, warped, radius)
    return value, g_img[..., None] * dwarp_didx / np.asarray(spacing)


def lncc_gradient(fixed, moving, radius=3, disp=None):
    """Gradient of ``lncc(fixed, warp(moving, disp))`` with respect to ``disp``.

    The result is an ascent direction per voxel in similarity per physical
    unit of displacement (zero displacement when ``disp`` is omitted).
    """
    _check_same(fixed, moving)
    d = np.zeros(fixed.dims + (3,)) if disp is None else np.asarray(disp.data, np.float64)
    _, g = _similarity_and_disp_grad(
        np.asarray(fixed.data, np.float64), np.asarray(moving.data, np.float64), d, fixed.spacing, radius
    )
    return VectorField3D(g, fixed.spacing, FieldKind.DISPLACEMENT)


# ---------------------------------------------------------------------------
# exponential map and Jacobians


def _max_voxel_norm(arr, spacing):
    return float(np.sqrt(((arr / np.asarray(spacing)) ** 2).sum(-1)).max(initial=0.0))


def default_squaring_steps(v_arr, spacing, minimum=4):
    m = _max_voxel_norm(v_arr, spacing)
    n = minimum
    while m / 2.0 ** n >= 0.5:
        n += 1
    return n


def _exp_array(v, spacing, steps=None):
    if steps is None:
        steps = default_squaring_steps(v, spacing)
    d = np.asarray(v, np.float64) / 2.0 ** steps
    for _ in range(steps):
        d = _compose_arrays(d, d, spacing)
    return d


def exponentiate(v, squaring_steps=None):
    """Displacement of the flow of a stationary velocity field at time one."""
    if v.kind is not FieldKind.VELOCITY:
        raise ValueError("exponentiate expects a Velocity field")
    d = _exp_array(v.data, v.spacing, squaring_steps)
    return VectorField3D(d, v.spacing, FieldKind.DISPLACEMENT)


def _jacobian_array(d, spacing):
    grads = [np.gradient(d[..., c], *spacing, edge_order=1) for c in range(3)]
    j = [[grads[r][c] + (1.0 if r == c else 0.0) for c in range(3)] for r in range(3)]
    return (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )


def jacobian_determinant(d):
    """det(I + grad d) per voxel; central differences, one-sided at borders."""
    return Volume3D(_jacobian_array(np.asarray(d.data, np.float64), d.spacing), d.spacing)


# ---------------------------------------------------------------------------
# affine


@dataclass
class AffineTransform:
    """``x -> A (x - c) + c + t`` in physical coordinates, ``c`` the grid centre."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.translation))):
            raise ValueError("affine parameters must be finite")
        if np.linalg.det(self.matrix) <= 0:
            raise ValueError("affine matrix must preserve orientation (det > 0)")

    @classmethod
    def identity(cls):
        return cls()

    def displacement_array(self, dims, spacing):
        x = _index_grid(tuple(dims)) * np.asarray(spacing) - physical_center(dims, spacing)
        return x @ (self.matrix - np.eye(3)).T + self.translation

    def displacement(self, dims, spacing):
        return VectorField3D(self.displacement_array(dims, spacing), spacing, FieldKind.DISPLACEMENT)

    def apply(self, vol):
        disp = self.displacement_array(vol.dims, vol.spacing)
        out = _sample_displaced(vol.data, disp, vol.spacing)
        return Volume3D(out.astype(vol.data.dtype), vol.spacing)

    def to_dict(self):
        return {
            "matrix": self.matrix.tolist(),
            "translation": self.translation.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["matrix"], d["translation"], dict(d.get("metadata", {})))


def _affine_from_params(q, radius):
    return np.eye(3) + q[:9].reshape(3, 3) / radius, q[9:]


def register_affine(fixed, moving, params=RegistrationParams()):
    """Maximise LNCC over the 12 affine parameters by gradient ascent.

    Matrix parameters are scaled by the grid radius so that a unit step in
    any parameter moves voxels by about one physical unit.  A proposal that
    lowers the similarity is rejected and the step is halved.
    """
    _check_same(fixed, moving)
    pyr_f = build_pyramid(fixed, params.levels)
    pyr_m = build_pyramid(moving, params.levels)
    extent = np.asarray(fixed.dims) * np.asarray(fixed.spacing)
    radius = float(extent.max() / 2.0)
    q = np.zeros(12)
    s = -np.inf
    step = None
    for f_lvl, m_lvl, iters in zip(pyr_f, pyr_m, params.iters_per_level):
        f = np.asarray(f_lvl.data, np.float64)
        m = np.asarray(m_lvl.data, np.float64)
        sp = np.asarray(f_lvl.spacing)
        x = _index_grid(f_lvl.dims) * sp - physical_center(f_lvl.dims, f_lvl.spacing)
        step = float(sp.min())
        r = params.lncc_radius

        def evaluate(qq):
            a, t = _affine_from_params(qq, radius)
            disp = x @ (a - np.eye(3)).T + t
            s, g = _similarity_and_disp_grad(f, m, disp, sp, r)
            ga = g.reshape(-1, 3).T @ x.reshape(-1, 3) / radius
            return s, np.concatenate([ga.ravel(), g.sum(axis=(0, 1, 2))])

        s, g = evaluate(q)
        for _ in range(iters):
            norm = np.linalg.norm(g)
            if norm == 0:
                break
            cand = q + step * g / norm
            if np.linalg.det(_affine_from_params(cand, radius)[0]) <= 0:
                step *= 0.5
                continue
            s_new, g_new = evaluate(cand)
            if s_new > s:
                q, s, g = cand, s_new, g_new
                step *= 1.2
            else:
                step *= 0.5
    # only uphill moves are accepted, so q is the best point seen at the finest level
    a, t = _affine_from_params(q, radius)
    converged = step < 0.25 * float(np.asarray(fixed.spacing).min())
    if not converged:
        log.warning("affine registration did not settle (final step %.3g)", step)
    return AffineTransform(a, t, {"similarity": s, "converged": bool(converged), "final_step": step})


# ---------------------------------------------------------------------------
# diffeomorphic


@dataclass
class DiffeoResult:
    velocity: VectorField3D
    forward_disp: VectorField3D
    inverse_disp: VectorField3D
    final_similarity: float
    min_jacobian: float = float("nan")
    level_history: list = field(default_factory=list)


def _velocity_step(v, fixed, moving, sp, params, step, ref=0.0):
    d = _exp_array(v, sp, params.squaring_steps)
    s, g = _similarity_and_disp_grad(fixed, moving, d, sp, params.lncc_radius)
    sig = np.full(3, params.field_smoothing_sigma)
    if params.field_smoothing_sigma > 0:
        g = _smooth_array(g, sig)
    norm = np.sqrt((g ** 2).sum(-1))
    # normalise by the largest percentile seen on this level so steps shrink
    # as the gradient decays; per-voxel step is capped at ``step``
    ref = max(ref, float(np.percentile(norm, NORMALIZE_PERCENTILE)), GRADIENT_FLOOR / norm.size)
    v = v + step * g / np.maximum(norm, ref)[..., None]
    if params.field_smoothing_sigma > 0:
        v = _smooth_array(v, sig)
    return v, s, ref


def register_diffeo(fixed, moving, params=RegistrationParams()):
    """Multi-resolution SVF registration of an (affinely aligned) pair.

    Per iteration: warp ``moving`` by ``exp(v)``, take the LNCC gradient,
    smooth it, step ``v`` along it (max step ``step_size``), then smooth
    ``v``.  Both smoothings use ``field_smoothing_sigma`` voxels.
    """
    _check_same(fixed, moving)
    pyr_f = build_pyramid(fixed, params.levels)
    pyr_m = build_pyramid(moving, params.levels)
    v = None
    history = []
    for f_lvl, m_lvl, iters in zip(pyr_f, pyr_m, params.iters_per_level):
        sp = np.asarray(f_lvl.spacing)
        f = np.asarray(f_lvl.data, np.float64)
        m = np.asarray(m_lvl.data, np.float64)
        v = np.zeros(f_lvl.dims + (3,)) if v is None else _resample_array(v, f_lvl.dims)
        step = params.step_size if params.step_size is not None else 0.25 * float(sp.min())
        sims = []
        ref = 0.0
        for _ in range(iters):
            v, s, ref = _velocity_step(v, f, m, sp, params, step, ref)
            sims.append(s)
        d = _exp_array(v, sp, params.squaring_steps)
        sims.append(_lncc_value(f, _sample_displaced(m, d, sp), params.lncc_radius))
        history.append({"dims": list(f_lvl.dims), "start": sims[0], "end": sims[-1]})

    spacing = fixed.spacing
    fwd = _exp_array(v, spacing, params.squaring_steps)
    inv = _exp_array(-v, spacing, params.squaring_steps)
    jac = _jacobian_array(fwd, spacing)
    jmin = float(jac.min())
    if not jmin > 0:
        where = np.unravel_index(int(np.argmin(jac)), jac.shape)
        raise RegistrationError(
            f"non-diffeomorphic result: min Jacobian determinant {jmin:.4g} at voxel {where}; "
            f"max |v| = {_max_voxel_norm(v, spacing):.3g} voxels"
        )
    warped = _sample_displaced(np.asarray(moving.data, np.float64), fwd, spacing)
    sim = _lncc_value(np.asarray(fixed.data, np.float64), warped, params.lncc_radius)
    return DiffeoResult(
        velocity=VectorField3D(v, spacing, FieldKind.VELOCITY),
        forward_disp=VectorField3D(fwd, spacing, FieldKind.DISPLACEMENT),
        inverse_disp=VectorField3D(inv, spacing, FieldKind.DISPLACEMENT),
        final_similarity=sim,
        min_jacobian=jmin,
        level_history=history,
    )
