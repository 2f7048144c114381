"""Command-line interface: ``msdiffeo <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, datasets, haar, metrics, plotting
from .config import ConfigError, RunConfig, load_config
from .experiments import evaluate, toy_kernel_sweep, toy_s0_sweep
from .geodesic import integrate_flow, shoot, warp_image
from .grid_image import ImageFormatError, RoiBox, grid_points, load_image, mean_image, save_image
from .objective import control_grid
from .optimizer import estimate_atlas, register

log = logging.getLogger("msdiffeo")

IMAGE_SUFFIXES = (".pgm", ".rawf")


def _versions() -> dict:
    import numba
    import scipy

    return {"msdiffeo": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _parse_sets(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _prepare(args, extra: dict[str, str] | None = None) -> tuple[RunConfig, Path]:
    overrides = _parse_sets(getattr(args, "set", None))
    overrides.update(extra or {})
    cfg = load_config(getattr(args, "config", None), overrides)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.txt")
    (out / "versions.json").write_text(json.dumps(_versions(), indent=2) + "\n")
    return cfg, out


def _write_trace(trace, path) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec) + "\n")


def _parse_roi(text: str | None) -> RoiBox | None:
    """``r0,c0:r1,c1`` (half-open) to a RoiBox."""
    if not text:
        return None
    try:
        lo, hi = text.split(":")
        return RoiBox(tuple(int(v) for v in lo.split(",")), tuple(int(v) for v in hi.split(",")))
    except ValueError as exc:
        raise ConfigError(f"bad roi {text!r}: {exc}") from None


def _emit_visuals(cfg: RunConfig, out: Path, prefix: str, source, target, deformed, forward, speed,
                  momenta) -> None:
    if np.ndim(source) != 2:
        return
    if cfg.emit_grids:
        plotting.write_ppm(plotting.deformation_grid_rgb(forward, deformed), out / f"{prefix}grid.ppm")
        grid = control_grid(np.shape(source), cfg.optimizer.kernel)
        plotting.quiver_svg(grid.points, momenta, np.shape(source), out / f"{prefix}momenta.svg",
                            background=source)
    if cfg.emit_heatmaps:
        plotting.write_ppm(plotting.heatmap_rgb(speed), out / f"{prefix}speed.ppm")
    if cfg.emit_figures:
        plotting.plot_registration(source, target, deformed, forward, speed, out / f"{prefix}overview.png")


def cmd_gen_data(args) -> int:
    shape = tuple(int(v) for v in args.shape.split(","))
    manifest = datasets.write_dataset(args.out, args.dataset, args.seed, args.n, shape, args.deform_scale)
    print(f"wrote {len(manifest['files'])} images to {args.out}")
    return 0


def cmd_register(args) -> int:
    source = load_image(args.source)
    target = load_image(args.target)
    if source.shape != target.shape:
        raise ValueError(f"source {source.shape} and target {target.shape} differ in shape")
    cfg, out = _prepare(args, {"source": args.source, "target": args.target})
    roi = _parse_roi(args.roi)
    t0 = time.perf_counter()
    result = register(source, target, cfg.optimizer)
    ms = (time.perf_counter() - t0) * 1e3
    ev = evaluate(source, target, result, roi, ms)
    save_image(ev.deformed, out / "deformed.rawf")
    save_image(ev.deformed, out / "deformed.pgm")
    haar.save_pyramid(haar.fwt(result.momenta[0], vector=True), out / "momenta_wavelet.rawf")
    save_image(result.momenta[0], out / "momenta.rawf")
    ev.report.to_json(out / "report.json")
    if cfg.emit_trace:
        _write_trace(result.trace, out / "trace.jsonl")
        if cfg.emit_figures:
            plotting.plot_trace(result.trace, out / "trace.png")
    _emit_visuals(cfg, out, "", source, target, ev.deformed, ev.forward, ev.speed, result.momenta[0])
    print(ev.report.to_json())
    return 0


def _image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix == ".rawf")
    if not files:
        files = sorted(p for p in d.iterdir() if p.suffix == ".pgm")
    return files


def cmd_atlas(args) -> int:
    files = _image_files(args.image_dir)
    if len(files) < 2:
        raise ValueError(f"atlas estimation needs at least 2 images, found {len(files)} in {args.image_dir}")
    images = [load_image(p) for p in files]
    cfg, out = _prepare(args, {"image_dir": args.image_dir})
    t0 = time.perf_counter()
    result = estimate_atlas(images, cfg.optimizer)
    ms = (time.perf_counter() - t0) * 1e3
    save_image(result.template, out / "template.rawf")
    save_image(np.clip(result.template, 0, 1), out / "template.pgm")
    kernel = cfg.optimizer.kernel
    grid = control_grid(result.template.shape, kernel)
    reports = []
    initial = mean_image(images)
    for path, img, alpha in zip(files, images, result.momenta):
        traj = shoot(grid.points, alpha, kernel, cfg.optimizer.n_steps)
        deformed = warp_image(result.template, integrate_flow(traj, img.shape, "inverse"))
        forward = integrate_flow(traj, img.shape, "forward")
        total = float(np.sum((deformed - img) ** 2))
        rep = metrics.MetricReport(
            total_residual=total,
            relative_residual=metrics.relative_residual(total, float(np.sum((initial - img) ** 2))),
            ssim=metrics.ssim(deformed, img) if min(img.shape) >= 7 else None,
            sd_jacobian=metrics.sd_jacobian(forward) if min(img.shape) >= 3 else None,
            runtime_ms=ms)
        save_image(alpha, out / f"{path.stem}_momenta.rawf")
        rep.to_json(out / f"{path.stem}_report.json")
        reports.append({"image": path.name, **rep.to_dict()})
    summary = {"n_images": len(images), "initial_mean_residual": result.trace[0]["delta"],
               "final_mean_residual": result.state.deltas[-1], "iterations": result.state.iteration,
               "runtime_ms": ms, "subjects": reports}
    if args.truth:
        truth = load_image(args.truth)
        summary["ssim_template_vs_truth"] = metrics.ssim(result.template, truth)
        summary["ssim_mean_vs_truth"] = metrics.ssim(mean_image(images), truth)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if cfg.emit_trace:
        _write_trace(result.trace, out / "trace.jsonl")
        if cfg.emit_figures:
            plotting.plot_trace(result.trace, out / "trace.png")
    print(json.dumps({k: v for k, v in summary.items() if k != "subjects"}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg, out = _prepare(args)

    def progress(row):
        print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
              flush=True)

    if args.scenario == "toy-s0-sweep":
        s0 = [int(v) for v in args.s0.split(",")] if args.s0 else None
        rows = toy_s0_sweep(args.sigma, s0, cfg.optimizer, progress)
    elif args.scenario == "toy-kernel-sweep":
        sigmas = [float(v) for v in args.sigmas.split(",")]
        rows = toy_kernel_sweep(sigmas, cfg.optimizer, progress)
    else:
        raise ValueError(f"unknown scenario {args.scenario!r}")
    metrics.write_table(rows, out / f"{args.scenario}.csv")
    if cfg.emit_figures:
        plotting.plot_sweep(rows, out / f"{args.scenario}.png")
    print(f"wrote {out / (args.scenario + '.csv')}")
    return 0


def cmd_wavelet(args) -> int:
    """Round-trip and orthonormality self-test, or transform an image file."""
    if args.input:
        x = load_image(args.input)
        p = haar.fwt(x)
        if args.output:
            haar.save_pyramid(p, args.output)
        back = haar.iwt(p)
        print(json.dumps({"shape": list(x.shape), "max_scale": p.max_scale,
                          "roundtrip_error": float(np.max(np.abs(back - x)))}))
        return 0
    rng = np.random.default_rng(args.seed)
    shapes = [tuple(int(v) for v in s.split("x")) for s in args.shapes.split(",")]
    worst = 0.0
    for shape in shapes:
        for _ in range(args.trials):
            x = rng.standard_normal(shape)
            err = np.max(np.abs(haar.iwt(haar.fwt(x)) - x)) / np.max(np.abs(x))
            worst = max(worst, float(err))
    report = {"shapes": [list(s) for s in shapes], "trials": args.trials, "max_rel_error": worst}
    small = [s for s in shapes if np.prod(s) <= 1024]
    if small:
        errors = []
        for s in small:
            m_fwt, m_iwt = haar.build_transform_matrices(s).orthonormal()
            errors.append(float(np.max(np.abs(m_iwt.T - m_fwt))))
        report["max_orthonormality_error"] = max(errors)
    print(json.dumps(report))
    return 0 if worst < 1e-10 else 1


def cmd_metrics(args) -> int:
    a = load_image(args.a)
    b = load_image(args.b)
    roi = _parse_roi(args.roi)
    out = {"ssd": float(np.sum((a - b) ** 2))}
    if min(a.shape) >= 7:
        out["ssim"] = metrics.ssim(a, b)
    if roi is not None:
        out["roi_residual"] = metrics.roi_residual(a, b, roi)
    if args.positions:
        pos = load_image(args.positions)
        out["sd_jacobian"] = metrics.sd_jacobian(pos)
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msdiffeo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    g = sub.add_parser("gen-data", help="write synthetic images and a manifest")
    g.add_argument("--dataset", choices=("toy", "blobs"), default="toy")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--shape", default="32,32")
    g.add_argument("--deform-scale", type=float, default=1.0)
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("register", help="register SOURCE onto TARGET")
    r.add_argument("source")
    r.add_argument("target")
    r.add_argument("--roi", help="r0,c0:r1,c1 region for the ROI residual")
    config_args(r)
    r.set_defaults(func=cmd_register)

    a = sub.add_parser("atlas", help="estimate a template from a directory of images")
    a.add_argument("image_dir")
    a.add_argument("--truth", help="ground-truth template for SSIM comparison")
    config_args(a)
    a.set_defaults(func=cmd_atlas)

    s = sub.add_parser("sweep", help="toy-experiment sweeps written as CSV")
    s.add_argument("scenario", choices=("toy-s0-sweep", "toy-kernel-sweep"))
    s.add_argument("--sigma", type=float, default=2.0)
    s.add_argument("--s0", help="comma-separated initial scales (default: all)")
    s.add_argument("--sigmas", default="1.7,2,3")
    config_args(s)
    s.set_defaults(func=cmd_sweep)

    w = sub.add_parser("wavelet", help="Haar transform self-test or file transform")
    w.add_argument("--input")
    w.add_argument("--output")
    w.add_argument("--shapes", default="8x8,7x5,28x28,3x4x5,13x12x15")
    w.add_argument("--trials", type=int, default=10)
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_wavelet)

    m = sub.add_parser("metrics", help="compare two images")
    m.add_argument("a")
    m.add_argument("b")
    m.add_argument("--roi")
    m.add_argument("--positions", help="RAWF map positions for SD(J)")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        name = exc.filename or str(exc)
        print(f"msdiffeo: error: file not found: {name}", file=sys.stderr)
    except (ConfigError, ImageFormatError, ValueError, ArithmeticError, OSError) as exc:
        print(f"msdiffeo: error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
