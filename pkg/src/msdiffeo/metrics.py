"""Registration quality metrics: residuals, SSIM and Jacobian-determinant spread."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .grid_image import RoiBox

EXACT_MATCH = 0.0  # relative residual reported when the initial residual is already zero
SSIM_WINDOW = 7


@dataclass
class MetricReport:
    total_residual: float
    relative_residual: float
    roi_residual: float | None = None
    ssim: float | None = None
    sd_jacobian: float | None = None
    runtime_ms: float | None = None

    def __post_init__(self):
        if self.relative_residual < 0:
            raise ValueError("relative residual must be >= 0")
        if self.ssim is not None and not -1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError(f"ssim {self.ssim} outside [-1, 1]")
        if self.sd_jacobian is not None and self.sd_jacobian < 0:
            raise ValueError("sd_jacobian must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def relative_residual(delta_final: float, delta_initial: float) -> float:
    """``R = delta_final / delta_initial``.

    A zero initial residual means the images already matched and there was
    nothing to optimize; that case returns :data:`EXACT_MATCH`.
    """
    if delta_final < 0 or delta_initial < 0:
        raise ValueError("residuals must be >= 0")
    if delta_initial == 0:
        return EXACT_MATCH
    return float(delta_final) / float(delta_initial)


def _same_shape(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def ssim_components(a, b, data_range: float | None = None, win: int = SSIM_WINDOW) -> dict:
    """Local luminance, contrast and structure terms over all valid windows.

    Window statistics are uniform means over ``win`` voxels per axis with
    population (biased) variances. Returns the per-window maps and the
    mean SSIM under key ``ssim``.
    """
    a, b = _same_shape(a, b)
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}-voxel window")
    if data_range is None:
        data_range = max(a.max(), b.max()) - min(a.min(), b.min())
        if data_range == 0:
            data_range = 1.0
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    c3 = c2 / 2.0
    crop = tuple(slice(win // 2, k - (win - 1 - win // 2)) for k in a.shape)

    def mean(x):
        return uniform_filter(x, size=win, mode="constant")[crop]

    mu_a, mu_b = mean(a), mean(b)
    var_a = np.maximum(mean(a * a) - mu_a ** 2, 0.0)
    var_b = np.maximum(mean(b * b) - mu_b ** 2, 0.0)
    cov = mean(a * b) - mu_a * mu_b
    sd_a, sd_b = np.sqrt(var_a), np.sqrt(var_b)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    con = (2 * sd_a * sd_b + c2) / (var_a + var_b + c2)
    struct = (cov + c3) / (sd_a * sd_b + c3)
    # with c3 = c2/2 the product collapses to the usual two-factor form
    full = (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return {"luminance": lum, "contrast": con, "structure": struct, "map": full,
            "ssim": float(np.mean(full))}


def ssim(a, b, data_range: float | None = None) -> float:
    """Mean structural similarity over 7-voxel uniform windows."""
    return ssim_components(a, b, data_range)["ssim"]


def jacobian_determinants(positions, grid_shape: Sequence[int] | None = None) -> np.ndarray:
    """Determinant of the central-difference Jacobian at interior nodes."""
    pos = np.asarray(positions, dtype=float)
    if grid_shape is None:
        grid_shape = pos.shape[:-1]
    grid_shape = tuple(int(k) for k in grid_shape)
    d = len(grid_shape)
    pos = pos.reshape(grid_shape + (d,))
    if any(k < 3 for k in grid_shape):
        raise ValueError(f"need at least 3 nodes per axis, got {grid_shape}")
    inner = tuple(slice(1, -1) for _ in range(d))
    jac = np.empty(tuple(k - 2 for k in grid_shape) + (d, d))
    for q in range(d):
        hi = list(inner)
        lo = list(inner)
        hi[q] = slice(2, None)
        lo[q] = slice(None, -2)
        jac[..., :, q] = 0.5 * (pos[tuple(hi)] - pos[tuple(lo)])
    return np.linalg.det(jac)


def sd_jacobian(positions, grid_shape: Sequence[int] | None = None) -> float:
    """Population standard deviation of the Jacobian determinant of a map on the grid."""
    return float(np.std(jacobian_determinants(positions, grid_shape)))


def roi_residual(a, b, roi: RoiBox) -> float:
    """Sum of squared differences restricted to ``roi``."""
    a, b = _same_shape(a, b)
    roi.check(a.shape)
    diff = a[roi.slices()] - b[roi.slices()]
    return float(np.sum(diff * diff))


TABLE_COLUMNS = ("sigma_g", "k_g", "S0", "delta_J", "delta_J_roi", "sd_J", "runtime_ms",
                 "iterations", "R")


def write_table(rows: Iterable[dict], path, columns: Sequence[str] = TABLE_COLUMNS) -> None:
    """CSV with one row per run; missing fields are left empty."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            return v
