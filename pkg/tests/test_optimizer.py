import dataclasses

import numpy as np
import pytest

from msdiffeo import haar
from msdiffeo.objective import gradient
from msdiffeo.optimizer import (MultiscaleOptimizer, OptimizerConfig, estimate_atlas, line_search,
                                refine_scale, register, run)


def disc(shape, centre, radius):
    y, x = np.meshgrid(*[np.arange(k, dtype=float) for k in shape], indexing="ij")
    return 1.0 / (1.0 + np.exp((np.hypot(y - centre[0], x - centre[1]) - radius) / 1.2))


SMALL = (16, 16)  # 8x8 control points at sigma_g = 2, S_max = 3


def small_pair():
    return disc(SMALL, (7.0, 7.0), 4.0), disc(SMALL, (8.5, 9.0), 4.0)


def cfg(**kw):
    base = dict(sigma_g=2.0, n_steps=8, max_iters=12, workers=1)
    base.update(kw)
    return OptimizerConfig(**base)


# -- scale refinement --------------------------------------------------------

def test_refine_scale_examples():
    c = OptimizerConfig()
    assert refine_scale(100.0, 99.5, 3, 6, c) == 2
    assert refine_scale(100.0, 90.0, 3, 6, c) == 3
    assert refine_scale(100.0, 99.5, 1, 60, c) == 1
    assert refine_scale(100.0, 99.5, 3, 4, c) == 3  # too few iterations at this scale


# -- line search -------------------------------------------------------------

def test_line_search_quadratic():
    ok, steps, new, value, halvings = line_search(
        lambda p: float(p["x"] ** 2), {"x": np.array(1.0)}, {"x": np.array(2.0)}, {"x": 4.0}, 1.0)
    # trials land on -7, -3, -1 (no strict decrease) and then 0
    assert ok and value == 0.0
    assert halvings == 3 and steps["x"] == 0.5


def test_line_search_skips_zero_block():
    ok, _, new, _, _ = line_search(
        lambda p: float(p["x"] ** 2 + p["y"] ** 2),
        {"x": np.array(1.0), "y": np.array(3.0)}, {"x": np.array(2.0), "y": np.array(0.0)},
        {"x": 0.25, "y": None}, 10.0)
    assert ok and new["y"] == 3.0 and new["x"] == 0.5


def test_line_search_failure_keeps_params():
    ok, steps, new, _, halvings = line_search(
        lambda p: 5.0, {"x": np.array(1.0)}, {"x": np.array(1.0)}, {"x": 1.0}, 1.0, max_halvings=3)
    assert not ok and halvings == 3
    assert new["x"] == 1.0 and steps["x"] == 0.125


def test_line_search_rejects_non_finite_trials():
    calls = []

    def f(p):
        calls.append(float(p["x"]))
        return np.inf if abs(p["x"]) > 1 else float(p["x"] ** 2)

    ok, _, new, _, _ = line_search(f, {"x": np.array(0.9)}, {"x": np.array(1.0)}, {"x": 8.0}, 0.81)
    assert ok and abs(new["x"]) < 0.9 and calls[0] < -1


# -- one multiscale step -----------------------------------------------------

def test_masked_step_equals_projected_update():
    src, tgt = small_pair()
    c = cfg(S0=2)
    opt = MultiscaleOptimizer([tgt], src, dataclasses.replace(c, freeze_template=True))
    grid_shape = opt.grid.shape
    g = gradient(src, [opt.grid.zeros()], [tgt], c.cost_config, c.kernel, c.n_steps).grad_alpha[0]
    opt.step()
    h = opt.state.trace[-1]["step"]["momenta"] / c.step_growth
    # projection onto scales >= 2 built from explicit orthonormal matrices
    f_mat, i_mat = haar.build_transform_matrices(grid_shape).orthonormal()
    keep = ~haar.detail_mask(grid_shape, 2).ravel()
    proj = i_mat @ np.diag(keep.astype(float)) @ f_mat
    expected = np.stack([-h * (proj @ g[..., q].ravel()) for q in range(2)], -1).reshape(g.shape)
    np.testing.assert_allclose(opt.state.alphas[0], expected, atol=1e-10)
    assert opt.state.deltas[1] < opt.state.deltas[0]


def test_masking_invariant_and_schedule():
    src, tgt = small_pair()
    res = register(src, tgt, cfg(S0=3, max_iters=30))
    st = res.state
    hist = st.scale_history
    assert all(a >= b for a, b in zip(hist, hist[1:]))
    drops = [j for j in range(1, len(hist)) if hist[j] < hist[j - 1]]
    last = 0
    for j in drops:
        assert j - last >= 5
        last = j
    beta = haar.fwt_array(res.momenta[0], shape_ndim=2)
    below = haar.detail_mask(beta.shape[:-1], st.scale)
    assert np.max(np.abs(beta[below]), initial=0.0) < 1e-9
    energies = [r["E"] for r in res.trace]
    assert all(b <= a for a, b in zip(energies, energies[1:]))


def test_coarse_phase_keeps_fine_details_silent():
    src, tgt = small_pair()
    seen = []

    def cb(st):
        beta = haar.fwt_array(st.alphas[0], shape_ndim=2)
        seen.append(np.max(np.abs(beta[haar.detail_mask(beta.shape[:-1], st.trace[-1]["scale"])]),
                           initial=0.0))

    register(src, tgt, cfg(S0=3, max_iters=8), callback=cb)
    assert max(seen) < 1e-9


def test_scale_one_matches_wavelet_bypass():
    src, tgt = small_pair()
    a = register(src, tgt, cfg(S0=1, max_iters=8))
    b = register(src, tgt, cfg(S0=1, max_iters=8, use_wavelets=False))
    assert len(a.trace) == len(b.trace)
    for ra, rb in zip(a.trace, b.trace):
        assert ra["E"] == pytest.approx(rb["E"], rel=1e-9)
    np.testing.assert_allclose(a.momenta[0], b.momenta[0], atol=1e-9)


def test_identical_images_exact_match():
    src, _ = small_pair()
    res = register(src, src, cfg())
    assert res.state.exact_match and res.state.iteration == 0
    assert res.relative_residual == 0.0
    assert not np.any(res.momenta[0])


def test_convergence_only_at_finest_scale():
    src, tgt = small_pair()
    res = register(src, tgt, cfg(S0=3, max_iters=200, conv_threshold=0.5))
    assert res.state.converged
    assert res.state.scale == 1
    assert res.state.iters_at_scale >= 5


def test_trace_fields():
    src, tgt = small_pair()
    res = register(src, tgt, cfg(max_iters=3))
    for key in ("iter", "E", "data_term", "reg_term", "delta", "scale", "step", "ms"):
        assert key in res.trace[-1]
    assert res.trace[0]["iter"] == 0 and res.trace[-1]["iter"] == 3


def test_atlas_moves_template_and_frozen_does_not():
    imgs = [disc(SMALL, (7 + dy, 8 + dx), 4.0) for dy, dx in [(-1, 0), (1, 0), (0, -1), (0, 1)]]
    res = estimate_atlas(imgs, cfg(max_iters=6))
    start = np.mean(imgs, axis=0)
    assert not np.allclose(res.template, start)
    assert res.trace[-1]["E"] < res.trace[0]["E"]
    frozen = estimate_atlas(imgs, cfg(max_iters=3, freeze_template=True))
    np.testing.assert_array_equal(frozen.template, start)


def test_run_argument_checks():
    src, tgt = small_pair()
    with pytest.raises(ValueError):
        run([src], cfg(), "atlas")
    with pytest.raises(ValueError):
        run([src, tgt], cfg(), "register", template=src)
    with pytest.raises(ValueError):
        run([tgt], cfg(), "register")
    with pytest.raises(ValueError):
        run([tgt], cfg(), "bogus", template=src)
    with pytest.raises(ValueError):
        register(src, tgt, cfg(S0=9))


@pytest.mark.parametrize("bad", [dict(h0=0.0), dict(min_iters_per_scale=0), dict(step_init="x"),
                                 dict(n_steps=0), dict(sigma_eps=-1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        OptimizerConfig(**bad)


def test_default_initial_scale():
    assert OptimizerConfig().resolve_s0(5) == 4
    assert OptimizerConfig().resolve_s0(1) == 1
    assert OptimizerConfig(S0=5).resolve_s0(5) == 5
