"""Paired repeat slices for noisy-target training."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from ..volume import Slice2D

__all__ = ["pair_count", "PairedSliceDataset", "build_pairs", "center_crop"]


def pair_count(m, n, z):
    """Number of ordered within-subject repeat pairs over ``z`` slices."""
    if n < 2:
        raise ValueError("need at least two repeats per subject")
    if m < 0 or z < 0:
        raise ValueError("subject and slice counts must be >= 0")
    return m * n * (n - 1) * z


def center_crop(img, crop):
    nx, ny = img.shape
    if crop > nx or crop > ny:
        raise ValueError(f"crop {crop} exceeds slice dims {img.shape}")
    x0, y0 = (nx - crop) // 2, (ny - crop) // 2
    return img[x0:x0 + crop, y0:y0 + crop]


@dataclass
class PairedSliceDataset:
    pairs: list
    crop: int
    seed: int

    def __len__(self):
        return len(self.pairs)

    def arrays(self, dtype=np.float64):
        """Stacked ``(inputs, targets)`` of shape (P, crop, crop)."""
        if not self.pairs:
            shape = (0, self.crop, self.crop)
            return np.zeros(shape, dtype), np.zeros(shape, dtype)
        x = np.stack([a.data for a, _ in self.pairs]).astype(dtype)
        t = np.stack([b.data for _, b in self.pairs]).astype(dtype)
        return x, t


def build_pairs(subjects, crop=128, seed=0):
    """All ordered repeat pairs of every XY slice, center-cropped, then shuffled.

    ``subjects`` is a sequence (one entry per subject) of co-registered repeat
    volumes sharing one grid.
    """
    subjects = [list(s) for s in subjects]
    if not subjects:
        raise ValueError("no subjects given")
    dims = subjects[0][0].dims
    for si, vols in enumerate(subjects):
        if len(vols) < 2:
            raise ValueError(f"subject {si} has fewer than two repeats")
        for v in vols:
            if v.dims != dims:
                raise ValueError(f"subject {si}: repeat dims {v.dims} differ from {dims}")
    if crop > min(dims[0], dims[1]):
        raise ValueError(f"crop {crop} exceeds slice dims {dims[:2]}")

    pairs = []
    for si, vols in enumerate(subjects):
        slices = [
            [Slice2D(np.ascontiguousarray(center_crop(v.data[:, :, k], crop)), si, r, k) for k in range(dims[2])]
            for r, v in enumerate(vols)
        ]
        for k in range(dims[2]):
            for a, b in permutations(range(len(vols)), 2):
                pairs.append((slices[a][k], slices[b][k]))
    order = np.random.default_rng(seed).permutation(len(pairs))
    return PairedSliceDataset([pairs[i] for i in order], crop, seed)
