"""Orthonormal Haar transforms on non-dyadic d-dimensional grids.

Coefficients are stored in place: after the forward transform the array has
the source shape, with the coarsest approximation in the leading corner and
detail blocks of increasing fineness further out along each axis.

Scales are 1-based: the forward pass at scale ``s`` turns the low band of
scale ``s - 1`` (blocks of ``2**(s-1)`` samples) into a low band of scale
``s`` plus detail coefficients of scale ``s``.

Odd-length axes carry their unpaired last row into the low band. When the
last low-band entry covers only part of a full block, it is paired with a
weighted average so that every low-band coefficient stays the mean of its
support; this keeps the rows of the transform matrix mutually orthogonal,
and renormalizing each row to unit norm gives an orthonormal transform.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MATRIX_SIZE_CAP = 4096


def max_scale(shape: Sequence[int]) -> int:
    """Number of forward passes, ``ceil(log2(max(shape)))``."""
    if len(shape) == 0:
        raise ValueError("shape must be non-empty")
    kmax = int(max(shape))
    if kmax < 1:
        raise ValueError(f"invalid shape {tuple(shape)}")
    return (kmax - 1).bit_length()


def _check_shape(shape):
    shape = tuple(int(k) for k in shape)
    if len(shape) == 0 or any(k < 1 for k in shape):
        raise ValueError(f"invalid shape {shape}")
    return shape


def _border_delta(K, k, s):
    """Relative support of the last of ``k`` low-band entries at scale ``s - 1``.

    Returns None when the low band tiles the axis exactly.
    """
    block = 2 ** (s - 1)
    if K == block * k:
        return None
    delta = K / block - (k - 1)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"inconsistent lengths: K={K}, k={k} at scale {s}")
    return delta


def _pair_weights(k, K, s):
    """Weight of the second element of each pair in the low-band average."""
    w1 = np.full(k // 2, 0.5)
    if k % 2 == 0:
        delta = _border_delta(K, k, s)
        if delta is not None:
            w1[-1] = delta / (1.0 + delta)
    return w1


def _bcast(w, ndim):
    return w.reshape((-1,) + (1,) * (ndim - 1))


def _forward_axis0(x, K, s, squared=False):
    """One forward pass along axis 0. ``squared`` propagates squared row norms."""
    k = x.shape[0]
    if k <= 1:
        return x.copy()
    npair = k // 2
    x0 = x[0:2 * npair:2]
    x1 = x[1:2 * npair:2]
    w1 = _bcast(_pair_weights(k, K, s), x.ndim)
    w0 = 1.0 - w1
    if squared:
        low = w0 ** 2 * x0 + w1 ** 2 * x1
        det = w1 ** 2 * (x0 + x1)
    else:
        low = w0 * x0 + w1 * x1
        det = x0 - low
    if k % 2:
        low = np.concatenate([low, x[-1:]], axis=0)
    return np.concatenate([low, det], axis=0)


def _backward_axis0(b, n_low, K, s):
    k = b.shape[0]
    if k <= 1:
        return b.copy()
    npair = k // 2
    low = b[:n_low]
    det = b[n_low:]
    w1 = _bcast(_pair_weights(k, K, s), b.ndim)
    x = np.empty_like(b)
    x0 = low[:npair] + det
    x[0:2 * npair:2] = x0
    x[1:2 * npair:2] = (low[:npair] - (1.0 - w1) * x0) / w1
    if k % 2:
        x[-1] = low[-1]
    return x


def _copy_scales(w_s):
    return [list(w) for w in w_s]


def haar_forward_1d_step(arr, axis, K_axis, s, w_s):
    """One forward Haar pass along ``axis``.

    Parameters
    ----------
    arr : ndarray
        Current low-band block (length ``k`` along ``axis``).
    axis : int
        Axis to transform.
    K_axis : int
        Length of the original array along ``axis``.
    s : int
        Scale being produced (1-based).
    w_s : list of lists
        Per-axis low-band lengths in ascending order; not modified.

    Returns
    -------
    (ndarray, list of lists)
        Transformed block (low band first, then details) and updated scales
        with ``ceil(k/2)`` prepended for ``axis``.
    """
    arr = np.asarray(arr, dtype=float)
    if not -arr.ndim <= axis < arr.ndim:
        raise ValueError(f"axis {axis} out of range for {arr.ndim}-D array")
    if s < 1:
        raise ValueError("scale must be >= 1")
    axis = axis % arr.ndim
    k = arr.shape[axis]
    out = np.moveaxis(_forward_axis0(np.moveaxis(arr, axis, 0), K_axis, s), 0, axis)
    w_s = _copy_scales(w_s)
    w_s[axis] = [-(-k // 2)] + w_s[axis]
    return out, w_s


def haar_backward_1d_step(arr, axis, K_axis, s, w_s):
    """Inverse of :func:`haar_forward_1d_step`.

    ``w_s[axis]`` must start with ``[n_low, k]`` where ``k`` is the length
    of ``arr`` along ``axis``; the first entry is dropped on return.
    """
    arr = np.asarray(arr, dtype=float)
    if not -arr.ndim <= axis < arr.ndim:
        raise ValueError(f"axis {axis} out of range for {arr.ndim}-D array")
    axis = axis % arr.ndim
    ws = w_s[axis]
    if len(ws) < 2:
        raise ValueError("axis scale list exhausted")
    n_low, k = ws[0], ws[1]
    if arr.shape[axis] != k or n_low != -(-k // 2):
        raise ValueError(f"block length {arr.shape[axis]} inconsistent with scales {ws[:2]}")
    out = np.moveaxis(_backward_axis0(np.moveaxis(arr, axis, 0), n_low, K_axis, s), 0, axis)
    w_s = _copy_scales(w_s)
    w_s[axis] = w_s[axis][1:]
    return out, w_s


def _forward_passes(x, shape, squared=False):
    """All forward passes on the leading ``len(shape)`` axes of ``x`` (copied)."""
    beta = np.array(x, dtype=float, copy=True)
    w_s = [[K] for K in shape]
    for s in range(1, max_scale(shape) + 1):
        block = tuple(slice(0, w[0]) for w in w_s)
        cur = beta[block]
        for ax, K in enumerate(shape):
            k = cur.shape[ax]
            cur = np.moveaxis(_forward_axis0(np.moveaxis(cur, ax, 0), K, s, squared), 0, ax)
            w_s[ax] = [-(-k // 2)] + w_s[ax]
        beta[block] = cur
    return beta, tuple(tuple(w) for w in w_s)


def _backward_passes(beta, shape, w_s):
    x = np.array(beta, dtype=float, copy=True)
    w_s = [list(w) for w in w_s]
    for s in range(max_scale(shape), 0, -1):
        block = tuple(slice(0, w[1]) for w in w_s)
        cur = x[block]
        for ax, K in enumerate(shape):
            cur = np.moveaxis(_backward_axis0(np.moveaxis(cur, ax, 0), w_s[ax][0], K, s), 0, ax)
            w_s[ax] = w_s[ax][1:]
        x[block] = cur
    return x


@functools.lru_cache(maxsize=64)
def _renorm_cached(shape):
    q, _ = _forward_passes(np.ones(shape), shape, squared=True)
    r = 1.0 / np.sqrt(q)
    r.setflags(write=False)
    return r


def renormalization(shape: Sequence[int]) -> np.ndarray:
    """Per-coefficient factors ``1 / ||row of M_FWT||`` for an unnormalized transform.

    Computed by pushing squared weights through the forward passes, which is
    exact because every pass combines entries with disjoint supports.
    """
    return _renorm_cached(_check_shape(shape))


def expected_axis_scales(shape: Sequence[int]) -> tuple[tuple[int, ...], ...]:
    shape = _check_shape(shape)
    S = max_scale(shape)
    out = []
    for K in shape:
        w = [K]
        for _ in range(S):
            w.insert(0, -(-w[0] // 2))
        out.append(tuple(w))
    return tuple(out)


@dataclass(frozen=True)
class WaveletPyramid:
    """In-place Haar coefficients of an array on a grid of ``source_shape``.

    ``coeffs`` has shape ``source_shape``, or ``source_shape + (ncomp,)`` for
    vector fields transformed component by component.
    """

    coeffs: np.ndarray
    axis_scales: tuple[tuple[int, ...], ...]
    rho: float = 1.0
    source_shape: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.source_shape:
            object.__setattr__(self, "source_shape", tuple(len(w) and w[-1] for w in self.axis_scales))

    @property
    def max_scale(self) -> int:
        return max_scale(self.source_shape)

    @property
    def is_vector(self) -> bool:
        return self.coeffs.ndim == len(self.source_shape) + 1

    def validate(self) -> None:
        shape = self.source_shape
        if self.coeffs.shape[:len(shape)] != shape:
            raise ValueError(f"coefficient array {self.coeffs.shape} does not match {shape}")
        if tuple(tuple(w) for w in self.axis_scales) != expected_axis_scales(shape):
            raise ValueError(f"inconsistent axis_scales {self.axis_scales} for shape {shape}")

    def with_coeffs(self, coeffs) -> "WaveletPyramid":
        return WaveletPyramid(np.asarray(coeffs, dtype=float), self.axis_scales, self.rho, self.source_shape)


def fwt(x, rho: float = 1.0, vector: bool = False) -> WaveletPyramid:
    """Forward Haar transform.

    With ``vector=True`` the last axis of ``x`` holds components and is left
    untouched. ``rho`` scales coefficients by ``R ** rho`` (1 gives the
    orthonormal transform, 0 the raw averages/differences).
    """
    x = np.asarray(x, dtype=float)
    shape = _check_shape(x.shape[:-1] if vector else x.shape)
    beta, w_s = _forward_passes(x, shape)
    if rho != 0:
        r = renormalization(shape)
        if vector:
            r = r[..., None]
        beta *= r ** rho
    return WaveletPyramid(beta, w_s, float(rho), shape)


def iwt(p: WaveletPyramid, rho: float | None = None) -> np.ndarray:
    """Inverse of :func:`fwt`; ``rho`` defaults to the pyramid's own."""
    p.validate()
    rho = p.rho if rho is None else rho
    shape = p.source_shape
    x = np.array(p.coeffs, dtype=float, copy=True)
    if rho != 0:
        r = renormalization(shape)
        if p.is_vector:
            r = r[..., None]
        x /= r ** rho
    return _backward_passes(x, shape, p.axis_scales)


def fwt_array(x, shape_ndim: int | None = None, rho: float = 1.0) -> np.ndarray:
    """Coefficients only; the first ``shape_ndim`` axes are transformed."""
    x = np.asarray(x, dtype=float)
    return fwt(x, rho, vector=shape_ndim is not None and shape_ndim < x.ndim).coeffs


def iwt_array(beta, shape_ndim: int | None = None, rho: float = 1.0) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    vector = shape_ndim is not None and shape_ndim < beta.ndim
    shape = beta.shape[:-1] if vector else beta.shape
    return iwt(WaveletPyramid(beta, expected_axis_scales(shape), rho, tuple(shape)))


@functools.lru_cache(maxsize=64)
def _scale_map_cached(shape):
    S = max_scale(shape)
    w_s = expected_axis_scales(shape)
    levels = []
    for ax, K in enumerate(shape):
        idx = np.arange(K)
        lev = S - np.searchsorted(np.asarray(w_s[ax]), idx, side="right")
        levels.append(lev.reshape((-1,) + (1,) * (len(shape) - ax - 1)))
    lev = functools.reduce(np.minimum, levels)
    lev = np.broadcast_to(lev, shape)
    labels = np.where(lev >= S, S + 1, lev + 1)
    labels.setflags(write=False)
    return labels


def scale_map(shape: Sequence[int]) -> np.ndarray:
    """Scale label of every coefficient in the in-place layout.

    Detail coefficients get their scale ``1..S_max``; approximation
    coefficients get ``S_max + 1``.
    """
    return _scale_map_cached(_check_shape(shape))


def detail_mask(shape: Sequence[int], S: int) -> np.ndarray:
    """Boolean mask of detail coefficients with scale strictly below ``S``."""
    return scale_map(shape) < S


def zero_below_scale(p: WaveletPyramid, S: int) -> WaveletPyramid:
    """Silence detail coefficients finer than ``S``; returns a new pyramid."""
    smax = max(p.max_scale, 1)
    if not 1 <= S <= smax:
        raise ValueError(f"scale {S} outside [1, {smax}]")
    mask = detail_mask(p.source_shape, S)
    coeffs = np.array(p.coeffs, copy=True)
    coeffs[mask] = 0.0
    return p.with_coeffs(coeffs)


@dataclass(frozen=True)
class TransformMatrices:
    """Explicit transform matrices for small grids (testing and inspection).

    ``m_fwt`` and ``m_iwt`` are the raw (``rho = 0``) transforms; ``r``
    holds the reciprocal row norms of ``m_fwt``.
    """

    m_fwt: np.ndarray
    m_iwt: np.ndarray
    r: np.ndarray

    def orthonormal(self):
        """Renormalized pair ``(diag(r) M_FWT, M_IWT diag(1/r))``."""
        return self.r[:, None] * self.m_fwt, self.m_iwt / self.r[None, :]


def build_transform_matrices(shape: Sequence[int]) -> TransformMatrices:
    """Assemble ``M_FWT``/``M_IWT`` column by column from unit impulses."""
    shape = _check_shape(shape)
    n = int(np.prod(shape))
    if n > MATRIX_SIZE_CAP:
        raise ValueError(f"{n} entries exceeds the matrix size cap of {MATRIX_SIZE_CAP}")
    w_s = expected_axis_scales(shape)
    m_fwt = np.zeros((n, n))
    m_iwt = np.zeros((n, n))
    for i in range(n):
        z = np.zeros(n)
        z[i] = 1.0
        m_fwt[:, i] = fwt(z.reshape(shape), rho=0).coeffs.ravel()
        m_iwt[:, i] = iwt(WaveletPyramid(z.reshape(shape), w_s, 0.0, shape)).ravel()
    r = 1.0 / np.linalg.norm(m_fwt, axis=1)
    return TransformMatrices(m_fwt, m_iwt, r)


def save_pyramid(p: WaveletPyramid, path) -> None:
    """Write coefficients as RAWF and a ``.scales`` sidecar next to it."""
    from .grid_image import write_rawf

    write_rawf(p.coeffs, path)
    with open(str(path) + ".scales", "w") as fh:
        fh.write(f"rho {p.rho!r}\n")
        for w in p.axis_scales:
            fh.write(" ".join(str(v) for v in w) + "\n")


def load_pyramid(path) -> WaveletPyramid:
    from .grid_image import read_rawf

    coeffs = read_rawf(path)
    with open(str(path) + ".scales") as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or lines[0][0] != "rho":
        raise ValueError(f"{path}.scales: missing rho line")
    rho = float(lines[0][1])
    axis_scales = tuple(tuple(int(v) for v in ln) for ln in lines[1:])
    p = WaveletPyramid(coeffs, axis_scales, rho)
    p.validate()
    return p
