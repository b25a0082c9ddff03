"""Small encoder-decoder denoiser written directly in numpy.

Layout per stage ``d`` (0-based, ``D`` stages): one 3x3 conv to
``channels[d]`` followed by 2x2 average pooling.  A 3x3 bottleneck conv keeps
``channels[-1]``.  Each decoder stage upsamples by nearest neighbour,
concatenates the matching encoder output and applies a 3x3 conv.  A final
1x1 conv maps to one output channel with no activation.

Parameters live in one flat vector; each conv contributes its weights
``(c_out, c_in, k, k)`` followed by its bias ``(c_out,)`` in build order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["NetDescriptor", "DenoiserNet", "save_model", "load_model"]


@dataclass(frozen=True)
class NetDescriptor:
    depth: int = 2
    channels: tuple = (16, 32)
    kernel: int = 3
    leak: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 1 <= self.depth <= 5:
            raise ValueError("depth must be in 1..5")
        if len(self.channels) != self.depth or min(self.channels) < 1:
            raise ValueError("need one positive channel width per stage")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")

    def layers(self):
        """List of ``(name, c_in, c_out, k)`` in parameter order."""
        k, ch = self.kernel, self.channels
        out = []
        c_prev = 1
        for d, c in enumerate(ch):
            out.append((f"enc{d}", c_prev, c, k))
            c_prev = c
        out.append(("bottleneck", c_prev, ch[-1], k))
        c_prev = ch[-1]
        for d in reversed(range(self.depth)):
            out.append((f"dec{d}", c_prev + ch[d], ch[d], k))
            c_prev = ch[d]
        out.append(("head", c_prev, 1, 1))
        return out

    def n_params(self):
        return sum(co * ci * k * k + co for _, ci, co, k in self.layers())


def _conv_forward(x, w, b):
    """'Same' convolution of ``x`` laid out (C, B, H, W); returns output and im2col buffer."""
    c, bsz, h, wd = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    if k == 1:
        cols = x.reshape(c, -1)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))  # C, B, H, W, k, k
        cols = win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, -1)
    out = w.reshape(co, -1) @ cols + b[:, None]
    return out.reshape(co, bsz, h, wd), cols


def _conv_backward(gout, x_shape, cols, w):
    c, bsz, h, wd = x_shape
    co, _, k, _ = w.shape
    p = k // 2
    g = gout.reshape(co, -1)
    gw = (g @ cols.T).reshape(w.shape)
    gb = g.sum(axis=1)
    gcols = w.reshape(co, -1).T @ g
    if k == 1:
        return gcols.reshape(x_shape), gw, gb
    gcols = gcols.reshape(c, k, k, bsz, h, wd)
    gxp = np.zeros((c, bsz, h + 2 * p, wd + 2 * p), dtype=gout.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, :, di:di + h, dj:dj + wd] += gcols[:, di, dj]
    return gxp[:, :, p:p + h, p:p + wd], gw, gb


def _pool(x):
    c, b, h, w = x.shape
    return x.reshape(c, b, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def _up(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _up_backward(g):
    c, b, h, w = g.shape
    return g.reshape(c, b, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class DenoiserNet:
    """Encoder-decoder with skips; ``params`` is a flat float vector."""

    def __init__(self, descriptor=NetDescriptor(), params=None, seed=0, init="he"):
        self.descriptor = descriptor
        n = descriptor.n_params()
        if params is None:
            params = self._init_params(np.random.default_rng(seed), init)
        params = np.asarray(params)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    # -- parameter layout -------------------------------------------------
    def _views(self, params=None):
        params = self.params if params is None else params
        out, pos = {}, 0
        for name, ci, co, k in self.descriptor.layers():
            nw = co * ci * k * k
            out[name] = (params[pos:pos + nw].reshape(co, ci, k, k), params[pos + nw:pos + nw + co])
            pos += nw + co
        return out

    def _init_params(self, rng, init):
        params = np.zeros(self.descriptor.n_params())
        views = self._views(params)
        if init not in ("he", "identity", "zero_head"):
            raise ValueError(f"unknown init {init!r}")
        scale = 0.01 if init == "identity" else None
        for name, ci, co, k in self.descriptor.layers():
            w, _ = views[name]
            std = np.sqrt(2.0 / (ci * k * k)) if scale is None else scale
            w[...] = rng.normal(0.0, std, size=w.shape)
        if init == "zero_head":
            views["head"][0][...] = 0.0
        elif init == "identity":
            # route the input through channel 0 of enc0 and dec0; leaky ReLU
            # is the identity on positive intensities
            c = self.descriptor.kernel // 2
            views["enc0"][0][0, 0, c, c] = 1.0
            # dec0 sees concat(upsampled deeper features, enc0 output)
            ci_dec0 = self.descriptor.layers()[-2][1]
            views["dec0"][0][0, ci_dec0 - self.descriptor.channels[0], c, c] = 1.0
            views["head"][0][0, 0, 0, 0] = 1.0
        return params

    @property
    def n_params(self):
        return self.params.size

    def copy(self):
        return DenoiserNet(self.descriptor, self.params.copy())

    def check_shape(self, h, w):
        m = 2 ** self.descriptor.depth
        if h % m or w % m:
            raise ValueError(f"slice dims ({h}, {w}) must be divisible by {m}")

    # -- forward / backward ----------------------------------------------
    def _run(self, x, keep):
        views = self._views()
        a = self.descriptor.leak
        tape = []
        skips = []
        h = x
        for d in range(self.descriptor.depth):
            w, b = views[f"enc{d}"]
            z, cols = _conv_forward(h, w, b)
            tape.append((f"enc{d}", h.shape, cols, z))
            h = np.where(z > 0, z, a * z)
            skips.append(h)
            h = _pool(h)
        w, b = views["bottleneck"]
        z, cols = _conv_forward(h, w, b)
        tape.append(("bottleneck", h.shape, cols, z))
        h = np.where(z > 0, z, a * z)
        for d in reversed(range(self.descriptor.depth)):
            u = np.concatenate([_up(h), skips[d]], axis=0)
            w, b = views[f"dec{d}"]
            z, cols = _conv_forward(u, w, b)
            tape.append((f"dec{d}", u.shape, cols, z))
            h = np.where(z > 0, z, a * z)
        w, b = views["head"]
        out, cols = _conv_forward(h, w, b)
        tape.append(("head", h.shape, cols, None))
        return out, (tape if keep else None)

    def _as_batch(self, x):
        x = np.asarray(x, dtype=self.params.dtype)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3:
            raise ValueError("expected a 2D slice or a (B, H, W) batch")
        self.check_shape(*x.shape[1:])
        return x[None], squeeze

    def forward(self, x):
        """Apply the network to a slice ``(H, W)`` or batch ``(B, H, W)``."""
        xb, squeeze = self._as_batch(x)
        out = self._run(xb, keep=False)[0][0]
        return out[0] if squeeze else out

    def loss_grad(self, x, target):
        """Mean absolute error and its gradient with respect to ``params``.

        ``sign(0)`` is taken as 0.
        """
        xb, _ = self._as_batch(x)
        t = np.asarray(target, dtype=self.params.dtype).reshape(xb.shape)
        out, tape = self._run(xb, keep=True)
        diff = out - t
        loss = float(np.abs(diff).mean())
        g = np.sign(diff) / diff.size
        return loss, self._backward(g, tape)

    def _backward(self, g, tape):
        views = self._views()
        grad = np.zeros_like(self.params)
        gviews = self._views(grad)
        a = self.descriptor.leak
        depth = self.descriptor.depth
        tape = list(tape)

        def conv_back(gz, entry):
            name, shape, cols, _ = entry
            gx, gw, gb = _conv_backward(gz, shape, cols, views[name][0])
            gviews[name][0][...] += gw
            gviews[name][1][...] += gb
            return gx

        gh = conv_back(g, tape.pop())  # head
        skip_grads = [None] * depth
        for d in range(depth):  # decoder stages pop shallowest first
            entry = tape.pop()
            gz = gh * np.where(entry[3] > 0, 1.0, a)
            gu = conv_back(gz, entry)
            c_up = gu.shape[0] - self.descriptor.channels[d]
            skip_grads[d] = gu[c_up:]
            gh = _up_backward(gu[:c_up])
        entry = tape.pop()  # bottleneck
        gz = gh * np.where(entry[3] > 0, 1.0, a)
        gh = conv_back(gz, entry)
        for d in reversed(range(depth)):
            entry = tape.pop()
            gh = _pool_backward(gh) + skip_grads[d]
            gz = gh * np.where(entry[3] > 0, 1.0, a)
            gh = conv_back(gz, entry)
        return grad


def save_model(net, path, extra=None):
    """Write ``<path>.json`` (descriptor) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    desc = asdict(net.descriptor)
    desc["channels"] = list(desc["channels"])
    meta = {"descriptor": desc, "n_params": int(net.n_params), "dtype": "<f4", "extra": extra or {}}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    net.params.astype("<f4").tofile(path.with_suffix(".bin"))


def load_model(path, dtype=np.float64):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    desc = NetDescriptor(**meta["descriptor"])
    params = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    if params.size != desc.n_params():
        raise ValueError(f"parameter blob holds {params.size} values, descriptor needs {desc.n_params()}")
    return DenoiserNet(desc, params.astype(dtype))
