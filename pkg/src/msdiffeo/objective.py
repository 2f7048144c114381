"""Atlas / registration cost and its exact discrete gradients.

``E = sum_i ( SSD(I_i, I_ref o Phi_i^{-1}) / sigma_eps^2 + |v_0,i|_V^2 )``

Gradients are obtained by running the midpoint-rule recursions of the
shoot and of the inverse flow backwards (discretize-then-differentiate),
so they match finite differences of :func:`cost` to round-off.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .geodesic import (DEFAULT_STEPS, ControlPointGrid, FlowTrajectory, KernelConfig, _advect,
                       _flat, kinetic_energy, shoot)
from .grid_image import grid_points, interpolate, interpolate_adjoint, interpolate_with_gradient


@dataclass(frozen=True)
class CostConfig:
    """``sigma_eps`` weighs the data term as ``1 / sigma_eps**2``."""

    sigma_eps: float = 0.1

    def __post_init__(self):
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")

    @property
    def weight(self) -> float:
        return 1.0 / self.sigma_eps ** 2


@dataclass
class CostTerms:
    energy: float
    data_terms: list[float]
    reg_terms: list[float]
    residuals: list[float]  # raw SSD per subject
    forwards: list = field(default_factory=list, repr=False, compare=False)

    @property
    def data_term(self) -> float:
        return float(sum(self.data_terms))

    @property
    def reg_term(self) -> float:
        return float(sum(self.reg_terms))

    @property
    def mean_residual(self) -> float:
        return float(np.mean(self.residuals))


@dataclass
class GradientBundle(CostTerms):
    grad_alpha: list[np.ndarray] = field(default_factory=list)
    grad_template: np.ndarray | None = None


def worker_count() -> int:
    env = os.environ.get("DIFFEO_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            pass
    return cpus


def _map_subjects(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def control_grid(image_shape, kernel: KernelConfig) -> ControlPointGrid:
    """Control points on a lattice of spacing ``sigma_g`` over the image."""
    return ControlPointGrid.for_image(image_shape, kernel.sigma_g)


@dataclass
class ForwardState:
    """Everything the adjoint needs from one subject's forward pass.

    Depends on the momenta only, so it stays valid when the template moves.
    """

    alpha: np.ndarray
    traj: FlowTrajectory
    y0: np.ndarray        # Phi^{-1} applied to the grid nodes
    path: np.ndarray
    mids: np.ndarray
    reg: float


def forward(alpha, c0, kernel: KernelConfig, n_steps: int, shape) -> ForwardState:
    a0 = _flat(alpha)
    traj = shoot(c0, a0, kernel, n_steps)
    y0, path, mids = _advect(traj, grid_points(shape), "inverse")
    return ForwardState(np.array(alpha, dtype=float), traj, y0, path, mids,
                        kinetic_energy(c0, a0, kernel))


def _subject(template, alpha, target, c0, cc, kernel, n_steps, with_grad, fs=None):
    shape = template.shape
    if fs is None or not np.array_equal(fs.alpha, alpha):
        fs = forward(alpha, c0, kernel, n_steps, shape)
    traj, y0, path, mids = fs.traj, fs.y0, fs.path, fs.mids
    if with_grad:
        warped, dwarp = interpolate_with_gradient(template, y0)
    else:
        warped = interpolate(template, y0)
    r = warped - np.asarray(target, dtype=float).ravel()
    ssd = float(r @ r)
    data = cc.weight * ssd
    reg = fs.reg
    if not with_grad:
        return data, reg, ssd, fs

    a0 = traj.a[0]
    T = traj.n_steps
    h = traj.dt
    s2, cut2 = kernel.s2, kernel.cut2
    g_warp = 2.0 * cc.weight * r
    g_template = interpolate_adjoint(shape, y0, g_warp)

    cbar = np.zeros_like(traj.c)
    abar = np.zeros_like(traj.a)
    cmbar = np.zeros_like(traj.c_mid)
    ambar = np.zeros_like(traj.a_mid)

    # inverse flow, replayed from t_0 back up to t_T
    ybar = g_warp[:, None] * dwarp
    for n in range(T):
        nxt = ybar.copy()
        gy, gc, ga = _kernels.kernel_vjp(mids[n], traj.c_mid[n], traj.a_mid[n], -h * ybar, s2, cut2)
        cmbar[n] += gc
        ambar[n] += ga
        nxt += gy
        gy, gc, ga = _kernels.kernel_vjp(path[n + 1], traj.c[n + 1], traj.a[n + 1], -0.5 * h * gy, s2, cut2)
        nxt += gy
        cbar[n + 1] += gc
        abar[n + 1] += ga
        ybar = nxt

    # geodesic shoot
    for n in range(T - 1, -1, -1):
        cbar[n] += cbar[n + 1]
        abar[n] += abar[n + 1]
        gc, ga = _kernels.hamiltonian_vjp(traj.c_mid[n], traj.a_mid[n],
                                          h * cbar[n + 1], h * abar[n + 1], s2, cut2)
        cmbar[n] += gc
        ambar[n] += ga
        cbar[n] += cmbar[n]
        abar[n] += ambar[n]
        gc, ga = _kernels.hamiltonian_vjp(traj.c[n], traj.a[n],
                                          0.5 * h * cmbar[n], 0.5 * h * ambar[n], s2, cut2)
        cbar[n] += gc
        abar[n] += ga

    g_alpha = abar[0] + 2.0 * _kernels.kernel_apply(c0, c0, a0, s2, cut2)
    if not (np.all(np.isfinite(g_alpha)) and np.all(np.isfinite(g_template))):
        raise FloatingPointError("non-finite adjoint state")
    return data, reg, ssd, fs, g_alpha.reshape(np.shape(alpha)), g_template


def _validate(template, momenta, targets):
    template = np.asarray(template, dtype=float)
    if len(momenta) != len(targets):
        raise ValueError(f"{len(momenta)} momentum fields for {len(targets)} targets")
    for t in targets:
        if np.shape(t) != template.shape:
            raise ValueError(f"target shape {np.shape(t)} != template shape {template.shape}")
    return template


def _items(momenta, targets, forwards):
    forwards = list(forwards) if forwards else [None] * len(momenta)
    if len(forwards) != len(momenta):
        raise ValueError("one cached forward state per subject expected")
    return list(zip(momenta, targets, forwards))


def cost(template, momenta: Sequence[np.ndarray], targets: Sequence[np.ndarray],
         cc: CostConfig, kernel: KernelConfig, n_steps: int = DEFAULT_STEPS,
         workers: int | None = None, forwards=None) -> CostTerms:
    """Evaluate the cost; momenta are ``(*grid.shape, d)`` arrays, one per target.

    The returned terms keep each subject's forward state so a following
    :func:`gradient` call at the same momenta can skip the forward pass.
    """
    template = _validate(template, momenta, targets)
    c0 = control_grid(template.shape, kernel).points
    out = _map_subjects(
        lambda it: _subject(template, it[0], it[1], c0, cc, kernel, n_steps, False, it[2]),
        _items(momenta, targets, forwards), workers)
    data = [o[0] for o in out]
    reg = [o[1] for o in out]
    return CostTerms(float(sum(data) + sum(reg)), data, reg, [o[2] for o in out],
                     [o[3] for o in out])


def gradient(template, momenta: Sequence[np.ndarray], targets: Sequence[np.ndarray],
             cc: CostConfig, kernel: KernelConfig, n_steps: int = DEFAULT_STEPS,
             workers: int | None = None, forwards=None) -> GradientBundle:
    """Cost plus gradients w.r.t. every momentum field and the template.

    ``forwards`` may hold forward states from an earlier evaluation; each
    is reused only if its momenta equal the requested ones exactly.
    """
    template = _validate(template, momenta, targets)
    c0 = control_grid(template.shape, kernel).points
    out = _map_subjects(
        lambda it: _subject(template, it[0], it[1], c0, cc, kernel, n_steps, True, it[2]),
        _items(momenta, targets, forwards), workers)
    g_template = np.zeros_like(template)
    for o in out:  # fixed order keeps the reduction reproducible
        g_template += o[5]
    data = [o[0] for o in out]
    reg = [o[1] for o in out]
    return GradientBundle(
        energy=float(sum(data) + sum(reg)), data_terms=data, reg_terms=reg,
        residuals=[o[2] for o in out], forwards=[o[3] for o in out],
        grad_alpha=[o[4] for o in out], grad_template=g_template)


def fd_gradient_oracle(f: Callable[[np.ndarray], float], x, indices=None, rel_step: float = 1e-5):
    """Central finite differences of ``f`` at flat ``indices`` of ``x``.

    Step per coordinate is ``rel_step * max(1, |x_i|)``. Returns an array of
    the same length as ``indices`` (all coordinates when None).
    """
    x = np.array(x, dtype=float, copy=True)
    flat = x.reshape(-1)
    if indices is None:
        indices = np.arange(flat.size)
    out = np.empty(len(indices))
    for j, i in enumerate(indices):
        h = rel_step * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * h)
    return out
