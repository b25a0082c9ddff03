"""Adam training with an L1 loss, and slicewise inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..volume import Volume3D

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainingError", "train", "denoise_volume", "write_loss_csv"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


class TrainingError(RuntimeError):
    def __init__(self, message, epoch, batch_index):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index


def train(net, dataset, cfg=TrainConfig(), inputs=None, targets=None):
    """Train ``net`` in place on ``dataset``; returns ``(net, per-epoch mean loss)``.

    Batches are drawn from a seeded permutation each epoch.  ``inputs`` and
    ``targets`` may be passed as pre-stacked arrays instead of a dataset.
    """
    if inputs is None:
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        inputs, targets = dataset.arrays(net.params.dtype)
    elif len(inputs) == 0:
        raise ValueError("empty dataset")
    n = len(inputs)
    rng = np.random.default_rng(cfg.seed)
    m = np.zeros_like(net.params)
    v = np.zeros_like(net.params)
    t = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, g = net.loss_grad(inputs[idx], targets[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite loss in epoch {epoch}, batch {bi}", epoch, bi)
            t += 1
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** t)
            vhat = v / (1 - cfg.beta2 ** t)
            net.params = net.params - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
            total += loss * len(idx)
        history.append(total / n)
        log.info("epoch %d: mean L1 %.5f", epoch, history[-1])
    return net, history


def denoise_volume(net, vol, batch=8):
    """Denoise every XY slice of ``vol`` independently.

    Slices are reflect-padded up to the network's size multiple and cropped
    back afterwards.
    """
    nx, ny, nz = vol.dims
    mult = 2 ** net.descriptor.depth
    px, py = (-nx) % mult, (-ny) % mult
    data = np.asarray(vol.data, dtype=net.params.dtype)
    mode = "reflect" if min(nx, ny) > 1 else "edge"
    padded = np.pad(data, ((0, px), (0, py), (0, 0)), mode=mode)
    stack = np.moveaxis(padded, 2, 0)
    out = np.empty_like(stack)
    for s in range(0, nz, batch):
        out[s:s + batch] = net.forward(stack[s:s + batch])
    out = np.moveaxis(out, 0, 2)[:nx, :ny]
    return Volume3D(out.astype(vol.data.dtype), vol.spacing)


def write_loss_csv(history, path):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(history):
            w.writerow([i, repr(float(loss))])
