"""MetaImage (.mhd + .raw) volumes and 8/16-bit PGM/PNG slice exports."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .volume import FieldKind, Slice2D, VectorField3D, Volume3D

__all__ = [
    "VolumeFormatError",
    "MalformedHeaderError",
    "TruncatedDataError",
    "UnsupportedFormatError",
    "read_volume",
    "write_volume",
    "read_slice",
    "write_slice",
]


class VolumeFormatError(ValueError):
    pass


class MalformedHeaderError(VolumeFormatError):
    pass


class TruncatedDataError(VolumeFormatError):
    pass


class UnsupportedFormatError(VolumeFormatError):
    pass


def write_volume(vol, path):
    """Write a Volume3D or VectorField3D as ``path`` (.mhd) plus a .raw file."""
    path = Path(path)
    raw = path.with_suffix(".raw")
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "DimSize = " + " ".join(str(n) for n in vol.dims),
        "ElementSpacing = " + " ".join(repr(float(s)) for s in vol.spacing),
    ]
    if isinstance(vol, VectorField3D):
        lines.append("ElementNumberOfChannels = 3")
        lines.append(f"FieldKind = {vol.kind.value}")
    lines += [
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "ElementType = MET_FLOAT",
        f"ElementDataFile = {raw.name}",
    ]
    path.write_text("\n".join(lines) + "\n")
    data = np.asarray(vol.data, dtype="<f4")
    # x fastest; vector components interleaved per voxel
    if data.ndim == 4:
        data = np.transpose(data, (3, 0, 1, 2))
    raw.write_bytes(data.ravel(order="F").tobytes())
    return path


def _parse_header(path):
    header = {}
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError(f"{path}: header is not text") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise MalformedHeaderError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _numbers(header, key, cast, count, path):
    try:
        vals = [cast(x) for x in header[key].split()]
    except KeyError:
        raise MalformedHeaderError(f"{path}: missing {key}") from None
    except ValueError:
        raise MalformedHeaderError(f"{path}: bad {key} value {header[key]!r}") from None
    if len(vals) != count:
        raise MalformedHeaderError(f"{path}: {key} needs {count} values, got {len(vals)}")
    return vals


def read_volume(path):
    """Read a .mhd/.raw pair written by :func:`write_volume` (or compatible)."""
    path = Path(path)
    header = _parse_header(path)
    if header.get("NDims", "3") != "3":
        raise UnsupportedFormatError(f"{path}: only NDims = 3 is supported")
    dims = _numbers(header, "DimSize", int, 3, path)
    if any(n <= 0 for n in dims):
        raise MalformedHeaderError(f"{path}: non-positive DimSize {dims}")
    if "ElementSpacing" in header:
        spacing = _numbers(header, "ElementSpacing", float, 3, path)
        if not all(sp > 0 for sp in spacing):
            raise MalformedHeaderError(f"{path}: ElementSpacing must be positive, got {spacing}")
    else:
        spacing = [1.0, 1.0, 1.0]
    etype = header.get("ElementType")
    if etype is None:
        raise MalformedHeaderError(f"{path}: missing ElementType")
    if etype != "MET_FLOAT":
        raise UnsupportedFormatError(f"{path}: ElementType {etype} unsupported (MET_FLOAT only)")
    for key in ("BinaryDataByteOrderMSB", "ElementByteOrderMSB"):
        if header.get(key, "False").lower() == "true":
            raise UnsupportedFormatError(f"{path}: big-endian data is not supported")
    try:
        channels = int(header.get("ElementNumberOfChannels", "1"))
    except ValueError:
        raise MalformedHeaderError(f"{path}: bad ElementNumberOfChannels") from None
    if channels not in (1, 3):
        raise UnsupportedFormatError(f"{path}: {channels} channels unsupported")
    datafile = header.get("ElementDataFile")
    if datafile is None:
        raise MalformedHeaderError(f"{path}: missing ElementDataFile")
    if datafile.upper() == "LOCAL":
        raise UnsupportedFormatError(f"{path}: inline (LOCAL) data is not supported")

    raw = (path.parent / datafile).read_bytes()
    expected = 4 * channels * dims[0] * dims[1] * dims[2]
    if len(raw) < expected:
        raise TruncatedDataError(f"{path}: data file has {len(raw)} bytes, header needs {expected}")
    if len(raw) > expected:
        raise MalformedHeaderError(f"{path}: data file has {len(raw)} bytes, header declares {expected}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if channels == 1:
        return Volume3D(flat.reshape(dims, order="F"), tuple(spacing))
    data = flat.reshape([3] + dims, order="F").transpose(1, 2, 3, 0)
    kind = FieldKind(header.get("FieldKind", FieldKind.DISPLACEMENT.value))
    return VectorField3D(np.ascontiguousarray(data), tuple(spacing), kind)


# ---------------------------------------------------------------------------
# 2D slices


def _sidecar(path):
    return Path(path).with_suffix(".json")


def _write_pgm(path, q, maxval):
    h, w = q.shape
    body = q.astype(">u2").tobytes() if maxval > 255 else q.astype(np.uint8).tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + body)


def _read_pgm(path):
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise VolumeFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else np.uint8
    count = w * h
    q = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return q.reshape(h, w).astype(np.int64), maxval


def write_slice(img, path, window=None, bits=8):
    """Quantise a 2D image to PGM (.pgm) or PNG (.png) with a JSON window sidecar.

    The image array is ``(nx, ny)``; it is stored with x along image columns.
    ``window`` is the ``(min, max)`` intensity pair mapped to 0 and full scale.
    """
    data = img.data if isinstance(img, Slice2D) else np.asarray(img, dtype=np.float64)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    lo, hi = (float(data.min()), float(data.max())) if window is None else map(float, window)
    maxval = 255 if bits == 8 else 65535
    span = hi - lo if hi > lo else 1.0
    q = np.rint(np.clip((data - lo) / span, 0.0, 1.0) * maxval).astype(np.int64).T
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        _write_pgm(path, q, maxval)
    elif suffix == ".png":
        arr = q.astype(np.uint8) if bits == 8 else q.astype(np.uint16)
        Image.fromarray(arr).save(path)
    else:
        raise ValueError(f"unsupported slice format {suffix!r} (use .pgm or .png)")
    _sidecar(path).write_text(json.dumps({"min": lo, "max": hi, "bits": bits}, indent=2))
    return path


def read_slice(path):
    """Inverse of :func:`write_slice`; returns intensities in the stored window."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        q, maxval = _read_pgm(path)
    else:
        with Image.open(path) as im:
            q = np.asarray(im).astype(np.int64)
            maxval = 65535 if q.max(initial=0) > 255 or im.mode.startswith("I") else 255
    meta_path = _sidecar(path)
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        lo, hi = meta["min"], meta["max"]
        maxval = 255 if meta.get("bits", 8) == 8 else 65535
    else:
        lo, hi = 0.0, float(maxval)
    span = hi - lo if hi > lo else 1.0
    return Slice2D((q.T / maxval) * span + lo)
