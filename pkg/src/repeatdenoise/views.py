"""Standard 2D views of a volume written as PNG images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import write_slice

__all__ = ["volume_views", "export_views"]


def volume_views(vol, axis=2):
    """Centre XY slice, centre XZ slice and the mean projection along ``axis``."""
    data = np.asarray(vol.data, dtype=np.float64)
    nx, ny, nz = data.shape
    return {
        "xy": data[:, :, nz // 2],
        "xz": data[:, ny // 2, :],
        "enface": data.mean(axis=axis),
    }


def export_views(vol, out_dir, window=None, axis=2, prefix=""):
    """Write the three views as 8-bit PNGs sharing one intensity window.

    The window defaults to the volume's min/max and is stored in a JSON
    sidecar next to each image.  Returns ``{view: path}``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if window is None:
        window = (float(np.min(vol.data)), float(np.max(vol.data)))
    paths = {}
    for name, img in volume_views(vol, axis).items():
        paths[name] = write_slice(img, out_dir / f"{prefix}{name}.png", window=window, bits=8)
    return paths
