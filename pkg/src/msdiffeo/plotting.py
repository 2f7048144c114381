"""Static visual outputs: PPM rasters, an SVG quiver and matplotlib report figures."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def write_ppm(rgb: np.ndarray, path) -> None:
    """Binary P6 from an ``(H, W, 3)`` array with values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got {rgb.shape}")
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3) / float(maxval)


def _line(canvas, p0, p1, color):
    n = int(np.ceil(np.max(np.abs(np.subtract(p1, p0))))) * 2 + 1
    t = np.linspace(0.0, 1.0, n)
    rows = np.rint(p0[0] + t * (p1[0] - p0[0])).astype(int)
    cols = np.rint(p0[1] + t * (p1[1] - p0[1])).astype(int)
    ok = (rows >= 0) & (rows < canvas.shape[0]) & (cols >= 0) & (cols < canvas.shape[1])
    canvas[rows[ok], cols[ok]] = color


def deformation_grid_rgb(positions: np.ndarray, background: np.ndarray | None = None,
                         every: int = 2, zoom: int = 4) -> np.ndarray:
    """Draw the lattice lines of a 2-D map ``positions[i, j] -> (row, col)``."""
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 3 or pos.shape[2] != 2:
        raise ValueError("deformation grids are drawn for 2-D maps only")
    h, w = pos.shape[:2]
    canvas = np.ones((h * zoom, w * zoom, 3))
    if background is not None:
        bg = np.kron(np.clip(background, 0, 1), np.ones((zoom, zoom)))
        canvas[:] = 1.0 - 0.35 * bg[..., None]
    p = pos * zoom + (zoom - 1) / 2.0
    color = np.array([0.1, 0.2, 0.8])
    for i in range(0, h, every):
        for j in range(w - 1):
            _line(canvas, p[i, j], p[i, j + 1], color)
    for j in range(0, w, every):
        for i in range(h - 1):
            _line(canvas, p[i, j], p[i + 1, j], color)
    return canvas


def heatmap_rgb(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Linear blue-to-red colormap of a nonnegative 2-D field."""
    v = np.asarray(values, dtype=float)
    vmax = float(v.max()) if vmax is None else float(vmax)
    t = v / vmax if vmax > 0 else np.zeros_like(v)
    t = np.clip(t, 0.0, 1.0)
    return np.stack([t, 1.0 - np.abs(2.0 * t - 1.0), 1.0 - t], axis=-1)


def quiver_svg(points: np.ndarray, vectors: np.ndarray, shape: Sequence[int], path,
               scale: float = 5.0, pixel: int = 8, background: np.ndarray | None = None) -> None:
    """Momentum arrows on the control points as a standalone SVG file."""
    h, w = int(shape[0]), int(shape[1])
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * pixel}" height="{h * pixel}">']
    if background is not None:
        for (i, j), val in np.ndenumerate(np.asarray(background)):
            if val > 0:
                g = int(255 * (1 - 0.6 * min(float(val), 1.0)))
                out.append(f'<rect x="{j * pixel}" y="{i * pixel}" width="{pixel}" height="{pixel}" '
                           f'fill="rgb({g},{g},{g})"/>')
    for p, v in zip(np.asarray(points).reshape(-1, 2), np.asarray(vectors).reshape(-1, 2)):
        if not np.any(v):
            continue
        y0, x0 = (p + 0.5) * pixel
        y1, x1 = (p + 0.5 + scale * v) * pixel
        out.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                   'stroke="orange" stroke-width="1.5"/>')
        out.append(f'<circle cx="{x1:.2f}" cy="{y1:.2f}" r="1.5" fill="orange"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False})
    return plt


def plot_registration(source, target, deformed, positions, speed, path) -> None:
    """Five-panel overview of a 2-D registration written to ``path``."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 5, figsize=(13, 2.9))
    for ax, img, title in zip(axes[:3], (source, target, deformed), ("source", "target", "deformed")):
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        ax.set_title(title)
    ax = axes[3]
    ax.imshow(deformed, cmap="gray", vmin=0, vmax=1, alpha=0.4)
    for i in range(0, positions.shape[0], 2):
        ax.plot(positions[i, :, 1], positions[i, :, 0], lw=0.5, color="tab:blue")
    for j in range(0, positions.shape[1], 2):
        ax.plot(positions[:, j, 1], positions[:, j, 0], lw=0.5, color="tab:blue")
    ax.set_title("grid")
    im = axes[4].imshow(speed, cmap="jet")
    axes[4].set_title("|v0|")
    fig.colorbar(im, ax=axes[4], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trace(trace: list[dict], path) -> None:
    """Cost and residual against iteration, with the active scale as steps."""
    plt = _pyplot()
    it = [r["iter"] for r in trace]
    fig, ax = plt.subplots(1, 2, figsize=(8, 3))
    ax[0].semilogy(it, [r["E"] for r in trace], label="E")
    ax[0].semilogy(it, [max(r["delta"], 1e-12) for r in trace], label="residual")
    ax[0].set_xlabel("iteration")
    ax[0].legend(frameon=False)
    ax[1].step(it, [r["scale"] for r in trace], where="post")
    ax[1].set_xlabel("iteration")
    ax[1].set_ylabel("scale")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows: list[dict], path) -> None:
    """Residuals, SD(J) and runtime against S0, one line per kernel width."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    for sigma in sorted({r["sigma_g"] for r in rows}):
        sub = sorted((r for r in rows if r["sigma_g"] == sigma), key=lambda r: r["S0"])
        s0 = [r["S0"] for r in sub]
        label = f"sigma_g={sigma:g}"
        axes[0].plot(s0, [r["delta_J"] for r in sub], "o-", label=label)
        axes[0].plot(s0, [r["delta_J_roi"] for r in sub], "x--", color=axes[0].lines[-1].get_color())
        axes[1].plot(s0, [r["sd_J"] for r in sub], "o-", label=label)
        axes[2].plot(s0, [r["runtime_ms"] / 1e3 for r in sub], "o-", label=label)
    axes[0].set_yscale("log")
    axes[0].set_ylabel("residual (solid) / ROI (dashed)")
    axes[1].set_ylabel("SD(J)")
    axes[2].set_ylabel("runtime [s]")
    for ax in axes:
        ax.set_xlabel("S0")
    axes[0].legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
