"""Slicewise non-local means, used to clean repeats before registration.

Only the deformations estimated on the filtered volumes are kept; the
filtered intensities themselves are thrown away afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Slice2D, Volume3D

__all__ = ["PrefilterParams", "nlm_denoise_slice", "prefilter_volume"]


@dataclass(frozen=True)
class PrefilterParams:
    patch_radius: int = 1
    search_radius: int = 5
    h: float = 0.07
    normalize: bool = True

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.search_radius < self.patch_radius:
            raise ValueError("search_radius must be >= patch_radius")
        if not self.h > 0:
            raise ValueError("h must be > 0")


def _nlm_stack(img, patch_radius, search_radius, h):
    """NLM over the first two axes of ``img`` (any trailing axes are batched).

    Weights are ``exp(-max(0, D^2 - 2 h^2) / h^2)`` with ``D^2`` the mean
    squared difference of clamp-to-edge patches.  Candidates are restricted
    to in-grid pixels of the search window.
    """
    img = np.asarray(img, dtype=np.float64)
    nx, ny = img.shape[:2]
    pr, sr = patch_radius, search_radius
    pad = pr + sr
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (img.ndim - 2)
    padded = np.pad(img, widths, mode="edge")
    box = (2 * pr + 1, 2 * pr + 1) + (1,) * (img.ndim - 2)
    h2 = h * h

    num = np.zeros_like(img)
    den = np.zeros_like(img)
    # region of the padded grid needed for patches centred on in-grid pixels
    core = (slice(sr, sr + nx + 2 * pr), slice(sr, sr + ny + 2 * pr))
    ref = padded[core]
    for ox in range(-sr, sr + 1):
        for oy in range(-sr, sr + 1):
            shifted = padded[sr + ox:sr + ox + nx + 2 * pr, sr + oy:sr + oy + ny + 2 * pr]
            d2 = ndimage.uniform_filter((ref - shifted) ** 2, size=box, mode="nearest")
            d2 = d2[pr:pr + nx, pr:pr + ny]
            w = np.exp(-np.maximum(0.0, d2 - 2.0 * h2) / h2)
            # only candidates whose centre lies inside the slice
            vx = slice(max(0, -ox), nx - max(0, ox))
            vy = slice(max(0, -oy), ny - max(0, oy))
            cand = img[vx.start + ox:vx.stop + ox, vy.start + oy:vy.stop + oy]
            num[vx, vy] += w[vx, vy] * cand
            den[vx, vy] += w[vx, vy]
    return num / den


def _normalized(data):
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return None, lo, hi
    return (data - lo) / (hi - lo), lo, hi


def nlm_denoise_slice(s, params=PrefilterParams()):
    data = np.asarray(s.data, dtype=np.float64)
    if params.normalize:
        norm, lo, hi = _normalized(data)
        if norm is None:
            return Slice2D(s.data.copy(), s.subject, s.repeat, s.z, dict(s.meta))
        out = _nlm_stack(norm, params.patch_radius, params.search_radius, params.h)
        out = out * (hi - lo) + lo
    else:
        out = _nlm_stack(data, params.patch_radius, params.search_radius, params.h)
    return Slice2D(out.astype(s.data.dtype), s.subject, s.repeat, s.z, dict(s.meta))


def prefilter_volume(v, params=PrefilterParams()):
    """Filter every z-slice of ``v`` independently.

    With ``normalize`` set, the whole volume is min-max scaled to [0, 1]
    first (one window for all slices) and scaled back afterwards.
    """
    data = np.asarray(v.data, dtype=np.float64)
    lo = hi = None
    if params.normalize:
        norm, lo, hi = _normalized(data)
        if norm is None:
            return v.copy()
        data = norm
    out = _nlm_stack(data, params.patch_radius, params.search_radius, params.h)
    if lo is not None:
        out = out * (hi - lo) + lo
    return Volume3D(out.astype(v.data.dtype), v.spacing)
