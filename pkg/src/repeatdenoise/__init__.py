"""Denoising of repeat volumetric scans via an unbiased deformable template
and Noise2Noise training on the co-registered repeats."""

from .volume import FieldKind, Slice2D, VectorField3D, Volume3D, build_pyramid, compose, gaussian_smooth, resample, warp
from .io import read_slice, read_volume, write_slice, write_volume
from .prefilter import PrefilterParams, prefilter_volume
from .registration import (
    AffineTransform,
    RegistrationError,
    RegistrationParams,
    exponentiate,
    jacobian_determinant,
    lncc,
    lncc_gradient,
    register_affine,
    register_diffeo,
)
from .template import SubjectTemplate, TemplateError, estimate_template, transport_warps

__version__ = "0.1.0"

__all__ = [
    "FieldKind", "Slice2D", "VectorField3D", "Volume3D", "build_pyramid", "compose", "gaussian_smooth", "resample", "warp",
    "read_slice", "read_volume", "write_slice", "write_volume",
    "PrefilterParams", "prefilter_volume",
    "AffineTransform", "RegistrationError", "RegistrationParams", "exponentiate", "jacobian_determinant",
    "lncc", "lncc_gradient", "register_affine", "register_diffeo",
    "SubjectTemplate", "TemplateError", "estimate_template", "transport_warps",
]
