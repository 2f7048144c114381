"""Toy registration runs and the S0 / kernel-width sweeps built on them."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import haar
from .datasets import ToyPair, make_toy_squares
from .geodesic import integrate_flow, shoot, velocity_at, warp_image
from .grid_image import RoiBox, grid_points
from .metrics import MetricReport, relative_residual, roi_residual, sd_jacobian, ssim
from .objective import control_grid
from .optimizer import OptimizerConfig, RunResult, register

TOY_SIGMAS = (1.7, 2.0, 3.0)


@dataclass
class Evaluation:
    report: MetricReport
    deformed: np.ndarray
    forward: np.ndarray       # (*shape, d) positions of Phi_1 on the grid
    speed: np.ndarray         # |v_0| on the grid


def evaluate(source, target, result: RunResult, roi: RoiBox | None = None,
             runtime_ms: float | None = None) -> Evaluation:
    """Deform ``source`` with the fitted momenta and compute every metric."""
    cfg = result.config
    kernel = cfg.kernel
    shape = np.shape(source)
    grid = control_grid(shape, kernel)
    traj = shoot(grid.points, result.momenta[0], kernel, cfg.n_steps)
    inverse = integrate_flow(traj, shape, "inverse")
    forward = integrate_flow(traj, shape, "forward")
    deformed = warp_image(source, inverse)
    diff = deformed - target
    total = float(np.sum(diff * diff))
    v0 = velocity_at(grid_points(shape), traj.c[0], traj.a[0], kernel)
    report = MetricReport(
        total_residual=total,
        relative_residual=relative_residual(total, float(np.sum((source - target) ** 2))),
        roi_residual=None if roi is None else roi_residual(deformed, target, roi),
        ssim=ssim(deformed, target) if min(shape) >= 7 else None,
        sd_jacobian=sd_jacobian(forward) if min(shape) >= 3 else None,
        runtime_ms=runtime_ms,
    )
    return Evaluation(report, deformed, forward, np.linalg.norm(v0, axis=1).reshape(shape))


def run_toy(sigma_g: float, S0: int | None, base: OptimizerConfig | None = None,
            pair: ToyPair | None = None, callback=None):
    """Register the toy pair once; returns ``(row, result, evaluation)``."""
    pair = pair or make_toy_squares()
    base = base or OptimizerConfig()
    cfg = dataclasses.replace(base, sigma_g=float(sigma_g), S0=S0)
    t0 = time.perf_counter()
    result = register(pair.source, pair.target, cfg, callback=callback)
    ms = (time.perf_counter() - t0) * 1e3
    ev = evaluate(pair.source, pair.target, result, pair.roi, ms)
    grid = control_grid(pair.source.shape, cfg.kernel)
    row = {
        "sigma_g": float(sigma_g),
        "k_g": grid.size,
        "S0": result.trace[0]["scale"],
        "delta_J": ev.report.total_residual,
        "delta_J_roi": ev.report.roi_residual,
        "sd_J": ev.report.sd_jacobian,
        "runtime_ms": ms,
        "iterations": result.state.iteration,
        "R": ev.report.relative_residual,
    }
    return row, result, ev


def toy_max_scale(sigma_g: float, image_side: int = 50) -> int:
    grid = control_grid((image_side, image_side), OptimizerConfig(sigma_g=sigma_g).kernel)
    return haar.max_scale(grid.shape)


def toy_s0_sweep(sigma_g: float = 2.0, s0_values: Iterable[int] | None = None,
                 base: OptimizerConfig | None = None, progress=None) -> list[dict]:
    """One toy registration per initial scale."""
    if s0_values is None:
        s0_values = range(1, toy_max_scale(sigma_g) + 1)
    rows = []
    for s0 in s0_values:
        row, _, _ = run_toy(sigma_g, s0, base)
        rows.append(row)
        if progress:
            progress(row)
    return rows


def toy_kernel_sweep(sigmas: Iterable[float] = TOY_SIGMAS, base: OptimizerConfig | None = None,
                     progress=None) -> list[dict]:
    """Single-scale (S0 = 1) and multiscale (S0 = S_max - 1) runs per kernel width."""
    rows = []
    for sigma in sigmas:
        for s0 in (1, max(toy_max_scale(sigma) - 1, 1)):
            row, _, _ = run_toy(sigma, s0, base)
            rows.append(row)
            if progress:
                progress(row)
    return rows
