"""Image quality scores: two no-reference metrics plus PSNR and SSIM.

Volumes are scored slice by slice on XY planes and the slice scores are
averaged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import Slice2D

__all__ = [
    "q_metric",
    "ad_metric",
    "psnr",
    "ssim",
    "QualityReport",
    "evaluate_methods",
    "write_report_csv",
]

COHERENCE_EPS = 1e-12
AD_VARIANCE_FLOOR = 1e-12


def _arr(img):
    a = img.data if isinstance(img, Slice2D) else img
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {a.shape}")
    return a


def _tiles(a, size):
    """Non-overlapping ``size x size`` blocks, shape (n_blocks, size*size); remainders dropped."""
    nx, ny = a.shape[0] // size, a.shape[1] // size
    a = a[:nx * size, :ny * size].reshape(nx, size, ny, size)
    return a.transpose(0, 2, 1, 3).reshape(nx * ny, size * size)


def q_metric(img, patch=8, tau=0.5):
    """Mean ``s1 * R`` over coherent patches of the gradient field.

    For each non-overlapping block the N x 2 matrix of central-difference
    gradients has singular values ``s1 >= s2``; the coherence is
    ``R = (s1 - s2) / (s1 + s2)``.  Blocks with ``R > tau`` are averaged;
    0 is returned when none qualify.
    """
    a = _arr(img)
    if a.shape[0] < patch or a.shape[1] < patch:
        raise ValueError(f"image {a.shape} is smaller than one {patch}x{patch} patch")
    if min(a.shape) < 2:
        return 0.0
    gx, gy = np.gradient(a)
    tx, ty = _tiles(gx, patch), _tiles(gy, patch)
    # singular values from the 2x2 Gram matrix [[a, b], [b, c]]
    ga, gb, gc = (tx * tx).sum(1), (tx * ty).sum(1), (ty * ty).sum(1)
    half_tr = 0.5 * (ga + gc)
    disc = np.sqrt(np.maximum(0.25 * (ga - gc) ** 2 + gb * gb, 0.0))
    s1 = np.sqrt(np.maximum(half_tr + disc, 0.0))
    s2 = np.sqrt(np.maximum(half_tr - disc, 0.0))
    tot = s1 + s2
    r = np.where(tot < COHERENCE_EPS, 0.0, (s1 - s2) / np.where(tot < COHERENCE_EPS, 1.0, tot))
    sel = r > tau
    if not sel.any():
        return 0.0
    return float((s1[sel] * r[sel]).mean())


def ad_metric(noisy, denoised, window=8):
    """Negated mean windowed correlation between method noise and the estimate.

    Windows where either signal has variance below the floor count as 0.
    Identity denoising therefore scores exactly 0; higher is better.
    """
    n, d = _arr(noisy), _arr(denoised)
    if n.shape != d.shape:
        raise ValueError(f"shape mismatch {n.shape} vs {d.shape}")
    if n.shape[0] < window or n.shape[1] < window:
        raise ValueError(f"image {n.shape} is smaller than one {window}x{window} window")
    r = _tiles(n - d, window)
    e = _tiles(d, window)
    r = r - r.mean(1, keepdims=True)
    e = e - e.mean(1, keepdims=True)
    vr, ve = (r * r).mean(1), (e * e).mean(1)
    ok = (vr > AD_VARIANCE_FLOOR) & (ve > AD_VARIANCE_FLOOR)
    corr = np.zeros(len(r))
    corr[ok] = (r[ok] * e[ok]).mean(1) / np.sqrt(vr[ok] * ve[ok])
    return float(-np.clip(corr, -1.0, 1.0).mean())


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, peak=1.0, window=8):
    """Mean SSIM over all ``window x window`` positions of two 2D images."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    w = min(window, *a.shape)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h = w // 2
    valid = (slice(h, a.shape[0] - (w - 1 - h)), slice(h, a.shape[1] - (w - 1 - h)))

    def box(x):
        return ndimage.uniform_filter(x, size=w, mode="constant")[valid]

    ma, mb = box(a), box(b)
    va = np.maximum(box(a * a) - ma * ma, 0.0)
    vb = np.maximum(box(b * b) - mb * mb, 0.0)
    cab = box(a * b) - ma * mb
    s = ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return float(s.mean())


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    if any(math.isinf(v) for v in vals):
        return math.inf
    return float(np.mean(vals))


@dataclass
class QualityReport:
    method: str
    rows: list = field(default_factory=list)  # dicts: image_id, Q, AD, PSNR, SSIM

    def mean(self, key):
        return _mean(r[key] for r in self.rows)

    @property
    def mean_q(self):
        return self.mean("Q")

    @property
    def mean_ad(self):
        return self.mean("AD")

    @property
    def mean_psnr(self):
        return self.mean("PSNR")

    @property
    def mean_ssim(self):
        return self.mean("SSIM")


def evaluate_methods(outputs, noisy, clean=None, patch=8, tau=0.5, window=8, peak=1.0, ids=None):
    """Score every method's volumes against the matching noisy inputs.

    ``outputs`` maps method name to a list of volumes aligned with ``noisy``
    (and ``clean`` when given).  Returns one :class:`QualityReport` per
    method, in the mapping's order.
    """
    noisy = list(noisy)
    ids = list(range(len(noisy))) if ids is None else list(ids)
    reports = []
    for method, vols in outputs.items():
        vols = list(vols)
        if len(vols) != len(noisy):
            raise ValueError(f"method {method!r}: {len(vols)} outputs for {len(noisy)} inputs")
        rep = QualityReport(method)
        for vi, (out, src) in enumerate(zip(vols, noisy)):
            if out.dims != src.dims:
                raise ValueError(f"method {method!r}, image {ids[vi]}: dims {out.dims} != {src.dims}")
            ref = clean[vi] if clean is not None else None
            for k in range(out.dims[2]):
                d, n = out.data[:, :, k], src.data[:, :, k]
                row = {
                    "image_id": f"{ids[vi]}:{k}",
                    "Q": q_metric(d, patch, tau),
                    "AD": ad_metric(n, d, window),
                    "PSNR": None,
                    "SSIM": None,
                }
                if ref is not None:
                    c = ref.data[:, :, k]
                    row["PSNR"] = psnr(c, d, peak)
                    row["SSIM"] = ssim(c, d, peak, window)
                rep.rows.append(row)
        reports.append(rep)
    return reports


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_report_csv(reports, path):
    """Per-slice rows followed by a block of dataset means per method."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "image_id", "Q", "AD", "PSNR", "SSIM"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.method, r["image_id"], _fmt(r["Q"]), _fmt(r["AD"]), _fmt(r["PSNR"]), _fmt(r["SSIM"])])
        w.writerow([])
        w.writerow(["summary", "n_images", "mean_Q", "mean_AD", "mean_PSNR", "mean_SSIM"])
        for rep in reports:
            w.writerow(
                [rep.method, len(rep.rows), _fmt(rep.mean_q), _fmt(rep.mean_ad), _fmt(rep.mean_psnr), _fmt(rep.mean_ssim)]
            )
