"""Unbiased per-subject template estimation and warp transport.

Repeats are affinely aligned to the first repeat once, then the template
alternates between nonlinear registration of every repeat and a voxelwise
mean of the warped repeats.  After each round the mean velocity is removed
from all members so the template sits at the centre of the group.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .registration import (
    AffineTransform,
    DiffeoResult,
    RegistrationError,
    RegistrationParams,
    _exp_array,
    _jacobian_array,
    register_affine,
    register_diffeo,
)
from .volume import FieldKind, VectorField3D, Volume3D, _compose_arrays, _index_grid, _sample_displaced, physical_center

log = logging.getLogger(__name__)

__all__ = [
    "TemplateError",
    "SubjectTemplate",
    "estimate_template",
    "transport_warps",
    "combined_displacement",
    "sharpness",
    "mean_velocity_norm",
]


class TemplateError(RuntimeError):
    def __init__(self, message, repeat_index=None):
        super().__init__(message)
        self.repeat_index = repeat_index


@dataclass
class SubjectTemplate:
    template: Volume3D
    affines: list
    diffeos: list
    iterations_run: int = 0
    sharpness_history: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.diffeos)


def sharpness(vol):
    """Mean gradient magnitude (central differences, physical units)."""
    grads = np.gradient(np.asarray(vol.data, np.float64), *vol.spacing)
    return float(np.sqrt(sum(g * g for g in grads)).mean())


def mean_velocity_norm(diffeos):
    """Max voxel magnitude of the mean member velocity (0 for an unbiased template)."""
    sp = np.asarray(diffeos[0].velocity.spacing)
    vbar = np.mean([d.velocity.data for d in diffeos], axis=0)
    return float(np.sqrt(((vbar / sp) ** 2).sum(-1)).max())


def combined_displacement(affine, diffeo, dims, spacing):
    """Displacement of the raw repeat seen from template space.

    A template voxel ``x`` maps through the diffeomorphism to
    ``y = x + phi(x)`` in the aligned frame, then through the affine to the
    raw frame; the composition is evaluated analytically so the raw data is
    interpolated exactly once.
    """
    sp = np.asarray(spacing)
    phi = np.zeros(tuple(dims) + (3,)) if diffeo is None else np.asarray(diffeo.forward_disp.data, np.float64)
    y = _index_grid(tuple(dims)) * sp + phi
    a = (y - physical_center(dims, spacing)) @ (affine.matrix - np.eye(3)).T + affine.translation
    return phi + a


def _transport_one(vol, affine, diffeo):
    disp = combined_displacement(affine, diffeo, vol.dims, vol.spacing)
    out = _sample_displaced(vol.data, disp, vol.spacing)
    return Volume3D(out.astype(vol.data.dtype), vol.spacing)


def transport_warps(raw, st):
    """Resample each raw repeat into template space in a single interpolation."""
    if len(raw) != st.n:
        raise ValueError(f"got {len(raw)} raw volumes for a template of {st.n} repeats")
    return [_transport_one(v, a, d) for v, a, d in zip(raw, st.affines, st.diffeos)]


def _mean_volume(vols):
    return Volume3D(np.mean([np.asarray(v.data, np.float64) for v in vols], axis=0).astype(np.float32), vols[0].spacing)


def _recenter(results):
    """Remove the mean velocity from every member."""
    sp = results[0].velocity.spacing
    vbar = np.mean([r.velocity.data for r in results], axis=0)
    shift = _exp_array(-vbar, sp)
    unshift = _exp_array(vbar, sp)
    out = []
    for r in results:
        fwd = _compose_arrays(np.asarray(r.forward_disp.data, np.float64), shift, sp)
        inv = _compose_arrays(unshift, np.asarray(r.inverse_disp.data, np.float64), sp)
        jmin = float(_jacobian_array(fwd, sp).min())
        out.append(
            DiffeoResult(
                velocity=VectorField3D(r.velocity.data - vbar, sp, FieldKind.VELOCITY),
                forward_disp=VectorField3D(fwd, sp, FieldKind.DISPLACEMENT),
                inverse_disp=VectorField3D(inv, sp, FieldKind.DISPLACEMENT),
                final_similarity=r.final_similarity,
                min_jacobian=jmin,
                level_history=r.level_history,
            )
        )
    return out


def _identity_result(vol):
    zero = VectorField3D.zeros(vol.dims, vol.spacing)
    return DiffeoResult(
        velocity=VectorField3D(zero.data, vol.spacing, FieldKind.VELOCITY),
        forward_disp=zero,
        inverse_disp=VectorField3D(zero.data.copy(), vol.spacing, FieldKind.DISPLACEMENT),
        final_similarity=float("nan"),
        min_jacobian=1.0,
        level_history=[],
    )


def _check_inputs(vols):
    if len(vols) < 2:
        raise ValueError("template estimation needs at least two repeats")
    dims, sp = vols[0].dims, vols[0].spacing
    for i, v in enumerate(vols):
        if v.dims != dims or not np.allclose(v.spacing, sp):
            raise ValueError(f"repeat {i} grid {v.dims}/{v.spacing} differs from repeat 0 {dims}/{sp}")


def estimate_template(prefiltered, params=RegistrationParams(), outer_iters=3, threads=1, affines=None):
    """Build a subject template from ``n >= 2`` pre-filtered repeats.

    ``affines`` may be supplied to skip the affine stage (one per repeat,
    mapping the first repeat's grid to each repeat).
    """
    _check_inputs(prefiltered)
    if affines is None:
        affines = [AffineTransform.identity()]
        for i, vol in enumerate(prefiltered[1:], start=1):
            affines.append(register_affine(prefiltered[0], vol, params))
            log.info("repeat %d affine similarity %.4f", i, affines[-1].metadata["similarity"])
    elif len(affines) != len(prefiltered):
        raise ValueError("need one affine per repeat")
    aligned = [_transport_one(v, a, None) for v, a in zip(prefiltered, affines)]
    template = _mean_volume(aligned)
    history = [sharpness(template)]
    diffeos = [_identity_result(template) for _ in prefiltered]

    def register(i):
        try:
            return register_diffeo(template, aligned[i], params)
        except RegistrationError as exc:
            raise TemplateError(f"registration of repeat {i} failed: {exc}", repeat_index=i) from exc

    it = 0
    for it in range(1, outer_iters + 1):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(register, range(len(aligned))))
        else:
            results = [register(i) for i in range(len(aligned))]
        diffeos = _recenter(results)
        for i, d in enumerate(diffeos):
            if not d.min_jacobian > 0:
                raise TemplateError(f"repeat {i}: re-centred warp folds (min Jacobian {d.min_jacobian:.4g})", i)
        template = _mean_volume([_transport_one(v, a, d) for v, a, d in zip(prefiltered, affines, diffeos)])
        history.append(sharpness(template))
        log.info("template iteration %d: sharpness %.5f, mean |v| %.3g voxels", it, history[-1], mean_velocity_norm(diffeos))
    return SubjectTemplate(template, list(affines), diffeos, it, history)
