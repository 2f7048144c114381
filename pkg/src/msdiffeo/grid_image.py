"""Scalar images and vector fields on regular grids.

Images are plain ``numpy`` float64 arrays of shape ``(K_1, ..., K_d)`` with
``d`` in {2, 3}. Vector fields carry a trailing component axis,
``(K_1, ..., K_d, d)``. Point sets are ``(n, d)`` arrays in voxel index
coordinates (unit spacing, origin at voxel 0).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ImageFormatError(ValueError):
    """Raised on malformed headers or payload/size mismatches."""


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box with half-open integer bounds ``[lo, hi)`` per axis."""

    lo: tuple[int, ...]
    hi: tuple[int, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("lo and hi must have the same length")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty roi {self.lo}..{self.hi}")

    @property
    def ndim(self) -> int:
        return len(self.lo)

    def check(self, shape: Sequence[int]) -> None:
        if len(shape) != self.ndim:
            raise ValueError(f"roi is {self.ndim}-D but image is {len(shape)}-D")
        for l, h, k in zip(self.lo, self.hi, shape):
            if l < 0 or h > k:
                raise ValueError(f"roi {self.lo}..{self.hi} out of bounds for shape {tuple(shape)}")

    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(l, h) for l, h in zip(self.lo, self.hi))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d: dict) -> "RoiBox":
        return cls(tuple(int(v) for v in d["lo"]), tuple(int(v) for v in d["hi"]))


def grid_points(shape: Sequence[int]) -> np.ndarray:
    """All node coordinates of a grid, row-major, as an ``(n, d)`` array."""
    axes = [np.arange(k, dtype=float) for k in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim not in (2, 3):
        raise ValueError(f"images must be 2-D or 3-D, got {img.ndim}-D")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    return img


def _corners(shape, points):
    """Lower-corner indices and fractional offsets for multilinear lookup.

    Coordinates are clamped to ``[0, K-1]``. Also returns a mask of the axes
    where clamping was active, where the interpolant is flat.
    """
    shape = np.asarray(shape)
    hi = (shape - 1).astype(float)
    clamped = np.clip(points, 0.0, hi)
    inside = (points > 0.0) & (points < hi)
    # last cell is [K-2, K-1]; single-voxel axes use cell [0, 0]
    i0 = np.minimum(np.floor(clamped).astype(np.int64), np.maximum(shape - 2, 0))
    frac = clamped - i0
    return i0, frac, inside


def _corner_offsets(d):
    return np.array(np.meshgrid(*([[0, 1]] * d), indexing="ij")).reshape(d, -1).T


def interpolate(img: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``img`` at ``points`` (clamped to the domain).

    ``points`` may be a single coordinate or an ``(n, d)`` array.
    """
    img = np.asarray(img, dtype=float)
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != img.ndim:
        raise ValueError(f"points are {pts.shape[1]}-D but image is {img.ndim}-D")
    d = img.ndim
    i0, frac, _ = _corners(img.shape, pts)
    maxidx = np.asarray(img.shape) - 1
    out = np.zeros(len(pts))
    for off in _corner_offsets(d):
        idx = np.minimum(i0 + off, maxidx)
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        out += w * img[tuple(idx.T)]
    return out[0] if single else out


def interpolate_with_gradient(img: np.ndarray, points: np.ndarray):
    """Values and spatial gradients (w.r.t. the query points) of the interpolant.

    Returns ``(values, grads)`` with shapes ``(n,)`` and ``(n, d)``. The
    gradient is zero along axes where the point was clamped.
    """
    img = np.asarray(img, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = img.ndim
    i0, frac, inside = _corners(img.shape, pts)
    maxidx = np.asarray(img.shape) - 1
    vals = np.zeros(len(pts))
    grads = np.zeros_like(pts)
    for off in _corner_offsets(d):
        idx = np.minimum(i0 + off, maxidx)
        f = img[tuple(idx.T)]
        wax = np.where(off == 1, frac, 1.0 - frac)
        vals += np.prod(wax, axis=1) * f
        for ax in range(d):
            others = np.prod(np.delete(wax, ax, axis=1), axis=1)
            sign = 1.0 if off[ax] == 1 else -1.0
            grads[:, ax] += sign * others * f
    grads *= inside
    return vals, grads


def interpolate_adjoint(shape: Sequence[int], points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Transpose of :func:`interpolate` with respect to the image values.

    Scatters ``weights[i]`` onto the grid nodes surrounding ``points[i]``
    with the multilinear weights, so that
    ``sum(interpolate(img, p) * w) == sum(img * interpolate_adjoint(shape, p, w))``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    shape = tuple(int(k) for k in shape)
    d = len(shape)
    i0, frac, _ = _corners(shape, pts)
    maxidx = np.asarray(shape) - 1
    out = np.zeros(shape)
    for off in _corner_offsets(d):
        idx = np.minimum(i0 + off, maxidx)
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        flat = np.ravel_multi_index(tuple(idx.T), shape)
        out += np.bincount(flat, weights=w * weights, minlength=out.size).reshape(shape)
    return out


def mean_image(images: Sequence[np.ndarray]) -> np.ndarray:
    """Voxelwise arithmetic mean of same-shape images."""
    if len(images) == 0:
        raise ValueError("mean_image needs at least one image")
    first = np.asarray(images[0], dtype=float)
    acc = np.zeros_like(first)
    for img in images:
        img = np.asarray(img, dtype=float)
        if img.shape != first.shape:
            raise ValueError(f"shape mismatch: {img.shape} vs {first.shape}")
        acc += img
    return acc / len(images)


def ssd(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum((np.asarray(a, float) - np.asarray(b, float)) ** 2))


# ---------------------------------------------------------------------------
# file formats

def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated PGM header")
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise ImageFormatError(f"{path}: bad PGM header field {tok!r}") from exc
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad PGM dimensions or maxval")
    pos += 1  # single whitespace byte before raster
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height
    payload = buf[pos:]
    if len(payload) != count * dtype.itemsize:
        raise ImageFormatError(
            f"{path}: payload has {len(payload)} bytes, expected {count * dtype.itemsize}")
    data = np.frombuffer(payload, dtype=dtype).astype(float) / maxval
    return data.reshape(height, width)


def write_pgm(img: np.ndarray, path, maxval: int = 255) -> None:
    """Write a 2-D image; intensities are clipped to [0, 1] then quantized."""
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM supports 2-D images only")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    raw = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (img.shape[1], img.shape[0], maxval))
        fh.write(raw)


def read_rawf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) < 2 or parts[0] != "RAWF":
        raise ImageFormatError(f"{path}: missing RAWF header")
    try:
        d = int(parts[1])
        shape = tuple(int(p) for p in parts[2:])
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed RAWF header {header!r}") from exc
    if d < 1 or len(shape) != d or any(k < 1 for k in shape):
        raise ImageFormatError(f"{path}: RAWF header declares d={d} but shape {shape}")
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise ImageFormatError(
            f"{path}: size mismatch, header {shape} needs {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def write_rawf(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr, dtype=float)
    header = "RAWF %d %s\n" % (arr.ndim, " ".join(str(k) for k in arr.shape))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def _infer_format(path, fmt):
    if fmt:
        return fmt.lower()
    ext = os.path.splitext(str(path))[1].lower()
    return {".pgm": "pgm", ".rawf": "rawf", ".raw": "rawf"}.get(ext, "rawf")


def load_image(path, fmt: str | None = None) -> np.ndarray:
    """Load a PGM-P5 (mapped to [0, 1]) or RAWF image as float64."""
    fmt = _infer_format(path, fmt)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image: {path}")
    if fmt == "pgm":
        return read_pgm(path)
    if fmt == "rawf":
        return read_rawf(path)
    raise ValueError(f"unknown image format {fmt!r}")


def save_image(img: np.ndarray, path, fmt: str | None = None) -> None:
    fmt = _infer_format(path, fmt)
    if fmt == "pgm":
        write_pgm(img, path)
    elif fmt == "rawf":
        write_rawf(img, path)
    else:
        raise ValueError(f"unknown image format {fmt!r}")
