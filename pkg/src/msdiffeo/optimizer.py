"""Coarse-to-fine gradient descent on Haar coefficients of the initial momenta.

Each iteration computes the momentum gradient with the usual adjoint,
moves it to the wavelet domain (an orthonormal change of basis, so the
transformed gradient is the gradient w.r.t. the coefficients), zeroes the
detail coefficients finer than the current scale, and takes a backtracked
step. The current scale is lowered by one whenever the mean residual
improves by less than 1% over an iteration, after a minimum number of
iterations at that scale.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import haar
from .geodesic import IntegrationError, KernelConfig
from .grid_image import mean_image
from .objective import CostConfig, CostTerms, control_grid, cost, gradient

log = logging.getLogger(__name__)


STEP_RULES = ("relative", "norm", "squared")


def _initial_step(rule: str, h0: float, grad_norm: float, energy: float,
                  total_norm: float | None = None) -> float:
    """First trial step of a parameter block.

    ``relative``: the linearized decrease of the first update is ``h0 * E``.
    It uses ``total_norm``, the gradient norm over all blocks, so a block
    whose gradient is only round-off does not get an enormous step.
    ``norm``: the first update has length ``h0``.
    ``squared``: ``h0 / |g|^2``, so the first update has length ``h0 / |g|``.
    """
    if rule == "relative":
        total = grad_norm if total_norm is None else total_norm
        return h0 * energy / total ** 2
    if rule == "norm":
        return h0 / grad_norm
    return h0 / grad_norm ** 2


@dataclass
class OptimizerConfig:
    sigma_g: float = 2.0
    h0: float = 0.01
    sigma_eps: float = 0.1
    conv_threshold: float = 1e-4
    min_iters_per_scale: int = 5
    S0: int | None = None            # None: S_max - 1
    max_iters: int = 300
    n_steps: int = 20
    freeze_template: bool = False
    use_wavelets: bool = True        # False bypasses the wavelet domain entirely
    kernel_cutoff: float | None = 4.0
    refine_threshold: float = 0.01
    max_halvings: int = 20
    step_growth: float = 1.5
    step_init: str = "relative"      # first trial step rule, see _initial_step
    workers: int | None = None

    def __post_init__(self):
        for name in ("sigma_g", "h0", "sigma_eps", "conv_threshold", "step_growth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.min_iters_per_scale < 1:
            raise ValueError("min_iters_per_scale must be >= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.step_init not in STEP_RULES:
            raise ValueError(f"step_init must be one of {STEP_RULES}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")

    @property
    def kernel(self) -> KernelConfig:
        return KernelConfig(self.sigma_g, self.kernel_cutoff)

    @property
    def cost_config(self) -> CostConfig:
        return CostConfig(self.sigma_eps)

    def resolve_s0(self, smax: int) -> int:
        smax = max(smax, 1)
        s0 = max(smax - 1, 1) if self.S0 is None else int(self.S0)
        if not 1 <= s0 <= smax:
            raise ValueError(f"S0={s0} outside [1, {smax}]")
        return s0


@dataclass
class OptimizerState:
    template: np.ndarray
    betas: list[np.ndarray]          # wavelet coefficients (raw momenta when bypassing)
    alphas: list[np.ndarray]
    scale: int
    max_scale: int
    terms: CostTerms
    iteration: int = 0
    iters_at_scale: int = 0
    steps: dict = field(default_factory=lambda: {"momenta": None, "template": None})
    deltas: list[float] = field(default_factory=list)
    scale_history: list[int] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    converged: bool = False
    exact_match: bool = False
    stalls: int = 0

    @property
    def energy(self) -> float:
        return self.terms.energy

    @property
    def delta(self) -> float:
        return self.terms.mean_residual


@dataclass
class RunResult:
    template: np.ndarray
    momenta: list[np.ndarray]
    trace: list[dict]
    state: OptimizerState
    config: OptimizerConfig

    @property
    def relative_residual(self) -> float:
        d0 = self.trace[0]["delta"]
        return 0.0 if d0 == 0 else self.trace[-1]["delta"] / d0


def refine_scale(delta_prev: float, delta_curr: float, scale: int, iters_at_scale: int,
                 config: OptimizerConfig) -> int:
    """Next scale: one finer when progress stalls below the refine threshold."""
    if scale <= 1 or iters_at_scale < config.min_iters_per_scale:
        return scale
    if delta_prev <= 0:
        return scale - 1
    if (delta_prev - delta_curr) / delta_prev < config.refine_threshold:
        return scale - 1
    return scale


def line_search(f: Callable[[dict], float], params: dict, grads: dict, steps: dict, e0: float,
                max_halvings: int = 20):
    """Backtracking on joint block updates ``p_b - h_b * g_b``.

    All step sizes are halved together until ``f`` strictly decreases below
    ``e0``. Blocks with a None step are left untouched. Returns
    ``(accepted, steps, new_params, value, halvings)``; on failure the
    original params are returned with the last (smallest) steps.
    """
    steps = dict(steps)
    value = None
    for halvings in range(max_halvings + 1):
        trial = {}
        for key, p in params.items():
            h = steps.get(key)
            if h is None:
                trial[key] = p
            elif isinstance(p, list):
                trial[key] = [pi - h * gi for pi, gi in zip(p, grads[key])]
            else:
                trial[key] = p - h * grads[key]
        value = f(trial)
        e = getattr(value, "energy", value)
        if np.isfinite(e) and e < e0:
            return True, steps, trial, value, halvings
        if halvings < max_halvings:
            steps = {k: (None if h is None else 0.5 * h) for k, h in steps.items()}
    return False, steps, params, value, max_halvings


def _block_norm(g) -> float:
    if isinstance(g, list):
        return float(np.sqrt(sum(np.sum(gi * gi) for gi in g)))
    return float(np.linalg.norm(g))


class MultiscaleOptimizer:
    """Drives registration (one target, frozen template) or atlas estimation."""

    def __init__(self, targets: Sequence[np.ndarray], template: np.ndarray, config: OptimizerConfig,
                 momenta: Sequence[np.ndarray] | None = None):
        self.targets = [np.asarray(t, dtype=float) for t in targets]
        if not self.targets:
            raise ValueError("need at least one target image")
        template = np.asarray(template, dtype=float)
        for t in self.targets:
            if t.shape != template.shape:
                raise ValueError(f"image shape {t.shape} != template shape {template.shape}")
        self.config = config
        self.kernel = config.kernel
        self.cc = config.cost_config
        self.grid = control_grid(template.shape, self.kernel)
        self.ndim = template.ndim
        smax = haar.max_scale(self.grid.shape)
        scale = config.resolve_s0(smax) if config.use_wavelets else 1
        if momenta is None:
            alphas = [self.grid.zeros() for _ in self.targets]
        else:
            alphas = [np.array(m, dtype=float) for m in momenta]
        betas = [self._to_beta(a) for a in alphas]
        if config.use_wavelets and momenta is not None:
            mask = haar.detail_mask(self.grid.shape, scale)
            for b in betas:
                b[mask] = 0.0
            alphas = [self._to_alpha(b) for b in betas]
        terms = self._cost(template, alphas)
        self.state = OptimizerState(template=template.copy(), betas=betas, alphas=alphas,
                                    scale=scale, max_scale=smax, terms=terms)
        self.state.deltas.append(terms.mean_residual)
        self.state.scale_history.append(scale)
        self.state.trace.append(self._record(0, 0.0, accepted=True))

    # -- parameter maps ----------------------------------------------------
    def _to_beta(self, alpha):
        if not self.config.use_wavelets:
            return np.array(alpha, dtype=float)
        return haar.fwt_array(alpha, shape_ndim=self.ndim)

    def _to_alpha(self, beta):
        if not self.config.use_wavelets:
            return np.array(beta, dtype=float)
        return haar.iwt_array(beta, shape_ndim=self.ndim)

    def _grad_beta(self, g_alpha, scale):
        if not self.config.use_wavelets:
            return g_alpha
        gb = haar.fwt_array(g_alpha, shape_ndim=self.ndim)
        gb[haar.detail_mask(self.grid.shape, scale)] = 0.0
        return gb

    def _cost(self, template, alphas):
        return cost(template, alphas, self.targets, self.cc, self.kernel, self.config.n_steps,
                    self.config.workers)

    def _record(self, it, ms, accepted, halvings=0):
        st = self.state
        return {
            "iter": it,
            "E": st.terms.energy,
            "data_term": st.terms.data_term,
            "reg_term": st.terms.reg_term,
            "delta": st.terms.mean_residual,
            "scale": st.scale,
            "step": dict(st.steps),
            "ms": ms,
            "accepted": accepted,
            "halvings": halvings,
        }

    # -- one iteration -----------------------------------------------------
    def step(self) -> bool:
        """One multiscale iteration; returns True if the update was accepted."""
        cfg = self.config
        st = self.state
        t0 = time.perf_counter()
        scale_used = st.scale
        gb = gradient(st.template, st.alphas, self.targets, self.cc, self.kernel, cfg.n_steps,
                      cfg.workers, forwards=st.terms.forwards)
        grads = {"momenta": [self._grad_beta(g, scale_used) for g in gb.grad_alpha]}
        params = {"momenta": st.betas}
        if not cfg.freeze_template:
            grads["template"] = gb.grad_template
            params["template"] = st.template

        norms = {key: _block_norm(g) for key, g in grads.items()}
        total = float(np.sqrt(sum(n * n for n in norms.values())))
        steps = {}
        for key, norm in norms.items():
            if norm == 0.0:
                steps[key] = None
                continue
            if st.steps.get(key) is None:
                st.steps[key] = _initial_step(cfg.step_init, cfg.h0, norm, gb.energy, total)
            steps[key] = st.steps[key]

        if all(h is None for h in steps.values()):
            accepted, halvings = False, 0
            new_terms = gb
        else:
            def f(trial):
                alphas = [self._to_alpha(b) for b in trial["momenta"]]
                trial["_alphas"] = alphas
                try:
                    return self._cost(trial.get("template", st.template), alphas)
                except (IntegrationError, FloatingPointError):
                    return np.inf

            accepted, used, trial, new_terms, halvings = line_search(
                f, params, grads, steps, gb.energy, cfg.max_halvings)
            if accepted:
                st.betas = trial["momenta"]
                st.alphas = trial["_alphas"]
                if "template" in trial:
                    st.template = trial["template"]
                st.terms = new_terms
                for key, h in used.items():
                    if h is not None:
                        st.steps[key] = h * cfg.step_growth
            else:
                st.stalls += 1
                for key, h in used.items():
                    if h is not None:
                        st.steps[key] = h
                log.debug("line search failed at iteration %d", st.iteration + 1)

        st.iteration += 1
        st.iters_at_scale += 1
        prev = st.deltas[-1]
        st.deltas.append(st.terms.mean_residual)
        ms = (time.perf_counter() - t0) * 1e3
        rec = self._record(st.iteration, ms, accepted, halvings)
        rec["scale"] = scale_used
        st.trace.append(rec)

        if cfg.use_wavelets:
            new_scale = refine_scale(prev, st.deltas[-1], st.scale, st.iters_at_scale, cfg)
            if new_scale != st.scale:
                st.scale = new_scale
                st.iters_at_scale = 0
        st.scale_history.append(st.scale)
        return accepted

    def converged(self) -> bool:
        st = self.state
        cfg = self.config
        if st.scale > 1 or st.iters_at_scale < cfg.min_iters_per_scale or len(st.trace) < 2:
            return False
        # mean relative decrease over the last window of iterations at scale 1,
        # so a single short backtracked step does not stop the run
        w = cfg.min_iters_per_scale
        e_old = st.trace[-1 - w]["E"]
        e_new = st.trace[-1]["E"]
        return (e_old - e_new) / max(abs(e_old), 1e-300) / w < cfg.conv_threshold

    def run(self, callback: Callable[[OptimizerState], None] | None = None) -> RunResult:
        st = self.state
        if st.terms.mean_residual == 0.0 and all(not np.any(a) for a in st.alphas):
            st.exact_match = True
            st.converged = True
        while not st.converged and st.iteration < self.config.max_iters:
            self.step()
            if callback is not None:
                callback(st)
            st.converged = self.converged()
        return RunResult(st.template, st.alphas, st.trace, st, self.config)


def run(images: Sequence[np.ndarray], config: OptimizerConfig, mode: str = "atlas",
        template: np.ndarray | None = None, callback=None) -> RunResult:
    """Estimate an atlas, or register ``template`` onto a single image.

    In ``register`` mode ``template`` is the source image and stays fixed.
    In ``atlas`` mode the template defaults to the mean of the images.
    """
    images = [np.asarray(im, dtype=float) for im in images]
    if mode == "register":
        if len(images) != 1:
            raise ValueError("registration takes exactly one target image")
        if template is None:
            raise ValueError("registration needs a source (template) image")
        config = OptimizerConfig(**{**asdict(config), "freeze_template": True})
    elif mode == "atlas":
        if len(images) < 2:
            raise ValueError("atlas estimation needs at least two images")
        if template is None:
            template = mean_image(images)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return MultiscaleOptimizer(images, template, config).run(callback)


def register(source, target, config: OptimizerConfig, callback=None) -> RunResult:
    return run([target], config, "register", template=source, callback=callback)


def estimate_atlas(images, config: OptimizerConfig, template=None, callback=None) -> RunResult:
    return run(images, config, "atlas", template=template, callback=callback)
