"""Deterministic synthetic data: the two-squares registration pair and blob populations."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geodesic import ControlPointGrid, KernelConfig, deform
from .grid_image import RoiBox, save_image


@dataclass
class ToyPair:
    source: np.ndarray
    target: np.ndarray
    roi: RoiBox
    geometry: dict


def make_toy_squares(image_side: int = 50) -> ToyPair:
    """Source/target pair with a large square that moves and a small one that does not.

    Rows grow downwards. In the source the 20x20 square sits in the
    lower-left part of the image; in the target it is shifted 8 pixels up
    and 8 to the right, with a 4x2 notch cut into its top edge. A 4x4
    square near the top-left corner is identical in both images. The ROI
    covers the notch with a 2 pixel margin.
    """
    n = int(image_side)
    if n < 40:
        raise ValueError("image_side must be at least 40")
    big, small, shift = 20, 4, 8
    r0, c0 = n - 10 - big, 10                 # source large square, top-left corner
    tr, tc = r0 - shift, c0 + shift           # target large square
    notch_c = tc + (big - small) // 2         # 4 wide, 2 deep, centred on the top edge
    sr, sc = 6, 6                             # small square

    src = np.zeros((n, n))
    src[r0:r0 + big, c0:c0 + big] = 1.0
    src[sr:sr + small, sc:sc + small] = 1.0
    tgt = np.zeros((n, n))
    tgt[tr:tr + big, tc:tc + big] = 1.0
    tgt[tr:tr + 2, notch_c:notch_c + 4] = 0.0
    tgt[sr:sr + small, sc:sc + small] = 1.0

    roi = RoiBox((tr - 2, notch_c - 2), (tr + 2 + 2, notch_c + 4 + 2))
    geometry = {
        "image_side": n,
        "large_square_source": [r0, c0, big],
        "large_square_target": [tr, tc, big],
        "notch": [tr, notch_c, 2, 4],
        "small_square": [sr, sc, small],
    }
    return ToyPair(src, tgt, roi, geometry)


def base_blob(shape=(32, 32), radius_frac: float = 0.28) -> np.ndarray:
    """Smooth anisotropic blob with values in [0, 1], centred in the grid."""
    shape = tuple(int(k) for k in shape)
    axes = [np.arange(k) - (k - 1) / 2.0 for k in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = 0.0
    for q, x in enumerate(mesh):
        rq = radius_frac * shape[q] * (1.0 + 0.25 * (q == 0))
        r2 = r2 + (x / rq) ** 2
    return 1.0 / (1.0 + np.exp(8.0 * (np.sqrt(r2) - 1.0)))


def make_blob_population(n: int, seed: int = 0, shape=(32, 32), deform_scale: float = 1.0,
                         sigma_g: float = 4.0, n_steps: int = 10) -> list[np.ndarray]:
    """``n`` random geodesic warps of :func:`base_blob`.

    Momenta are i.i.d. normal times ``deform_scale`` on a control lattice of
    spacing ``sigma_g``. They are drawn in antithetic pairs (alpha, -alpha)
    so the population is balanced around the base shape.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if deform_scale < 0:
        raise ValueError("deform_scale must be >= 0")
    base = base_blob(shape)
    if deform_scale == 0:
        return [base.copy() for _ in range(n)]
    rng = np.random.default_rng(seed)
    kernel = KernelConfig(sigma_g)
    grid = ControlPointGrid.for_image(base.shape, sigma_g)
    out = []
    alpha = None
    for i in range(n):
        if i % 2 == 0:
            alpha = deform_scale * rng.standard_normal(grid.shape + (grid.ndim,))
        else:
            alpha = -alpha
        img, _ = deform(base, grid, alpha, kernel, n_steps)
        out.append(img)
    return out


def write_dataset(outdir, name: str = "toy", seed: int = 0, n: int = 10,
                  shape=(32, 32), deform_scale: float = 1.0) -> dict:
    """Write images as PGM and RAWF plus a JSON manifest; returns the manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {"dataset": name, "seed": seed, "files": []}
    if name == "toy":
        pair = make_toy_squares()
        images = {"source": pair.source, "target": pair.target}
        manifest["geometry"] = pair.geometry
        manifest["roi"] = pair.roi.to_dict()
    elif name == "blobs":
        images = {f"blob_{i:02d}": im for i, im in
                  enumerate(make_blob_population(n, seed, shape, deform_scale))}
        manifest["geometry"] = {"shape": list(shape), "n": n, "deform_scale": deform_scale}
    else:
        raise ValueError(f"unknown dataset {name!r}")
    for key, img in images.items():
        for ext in (".pgm", ".rawf"):
            save_image(img, outdir / f"{key}{ext}")
        manifest["files"].append({"name": key, "pgm": f"{key}.pgm", "rawf": f"{key}.rawf"})
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
