import json

import numpy as np
import pytest

from msdiffeo import plotting
from msdiffeo.cli import main
from msdiffeo.grid_image import load_image, save_image
from msdiffeo.metrics import read_table


def disc(shape, centre, radius):
    y, x = np.meshgrid(*[np.arange(k, dtype=float) for k in shape], indexing="ij")
    return 1.0 / (1.0 + np.exp((np.hypot(y - centre[0], x - centre[1]) - radius) / 1.2))


@pytest.fixture
def pair(tmp_path):
    save_image(disc((16, 16), (7, 7), 4), tmp_path / "src.rawf")
    save_image(disc((16, 16), (8, 9), 4), tmp_path / "tgt.rawf")
    return tmp_path


def test_register_writes_outputs(pair, capsys):
    out = pair / "run"
    rc = main(["register", str(pair / "src.rawf"), str(pair / "tgt.rawf"), "--roi", "4,4:12,12",
               "--set", "max_iters=4", "--set", f"output={out}", "--set", "n_steps=8"])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["relative_residual"] < 1.0 and report["roi_residual"] is not None
    lines = (out / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 5 and {"iter", "E", "delta", "scale", "step", "ms"} <= json.loads(lines[-1]).keys()
    for name in ("config.txt", "versions.json", "deformed.pgm", "momenta.rawf", "grid.ppm",
                 "speed.ppm", "momenta.svg", "overview.png", "trace.png"):
        assert (out / name).exists(), name
    assert "max_iters = 4" in (out / "config.txt").read_text()
    assert load_image(out / "deformed.rawf").shape == (16, 16)


def test_config_file_and_disabled_outputs(pair):
    out = pair / "quiet"
    cfg = pair / "run.cfg"
    cfg.write_text(f"max_iters = 1\noutput = {out}\nemit_figures = false\nemit_grids = false\n")
    assert main(["register", str(pair / "src.rawf"), str(pair / "tgt.rawf"), "--config", str(cfg)]) == 0
    assert not (out / "overview.png").exists() and not (out / "grid.ppm").exists()
    assert (out / "trace.jsonl").exists()


def test_missing_input_is_reported(tmp_path, capsys):
    rc = main(["register", str(tmp_path / "missing.pgm"), str(tmp_path / "b.pgm")])
    assert rc == 1
    assert "missing.pgm" in capsys.readouterr().err


def test_bad_setting_is_reported(pair, capsys):
    rc = main(["register", str(pair / "src.rawf"), str(pair / "tgt.rawf"), "--set", "bogus=1"])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_gen_data_and_atlas(tmp_path, capsys):
    data = tmp_path / "blobs"
    assert main(["gen-data", "--dataset", "blobs", "--out", str(data), "--n", "3",
                 "--shape", "16,16"]) == 0
    assert len(list(data.glob("*.rawf"))) == 3
    truth = tmp_path / "truth.rawf"
    from msdiffeo.datasets import base_blob
    save_image(base_blob((16, 16)), truth)
    out = tmp_path / "atlas"
    assert main(["atlas", str(data), "--truth", str(truth), "--set", "max_iters=3",
                 "--set", "sigma_g=4", "--set", f"output={out}"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_images"] == 3 and "ssim_template_vs_truth" in summary
    assert (out / "template.pgm").exists() and (out / "blob_00_report.json").exists()


def test_atlas_needs_two_images(tmp_path, capsys):
    (tmp_path / "one").mkdir()
    save_image(np.zeros((8, 8)), tmp_path / "one" / "a.rawf")
    assert main(["atlas", str(tmp_path / "one")]) == 1
    assert main(["atlas", str(tmp_path / "nowhere")]) == 1


def test_wavelet_self_test(capsys):
    assert main(["wavelet", "--shapes", "8x8,7x5", "--trials", "3"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["max_rel_error"] < 1e-10 and report["max_orthonormality_error"] < 1e-10


def test_wavelet_file_transform(tmp_path, capsys):
    save_image(np.arange(35.0).reshape(7, 5), tmp_path / "x.rawf")
    assert main(["wavelet", "--input", str(tmp_path / "x.rawf"), "--output", str(tmp_path / "c.rawf")]) == 0
    assert json.loads(capsys.readouterr().out)["roundtrip_error"] < 1e-10


def test_metrics_command(pair, capsys):
    rc = main(["metrics", str(pair / "src.rawf"), str(pair / "src.rawf"), "--roi", "0,0:8,8"])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out["ssd"] == 0.0 and out["ssim"] == pytest.approx(1.0) and out["roi_residual"] == 0.0


def test_sweep_writes_csv_and_figure(tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = main(["sweep", "toy-s0-sweep", "--s0", "1,2", "--set", "max_iters=2",
               "--set", "n_steps=4", "--set", f"output={out}"])
    assert rc == 0
    rows = read_table(out / "toy-s0-sweep.csv")
    assert [r["S0"] for r in rows] == [1, 2]
    assert all(r["k_g"] == 625 for r in rows)
    assert (out / "toy-s0-sweep.png").exists()


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(0).random((5, 7, 3))
    plotting.write_ppm(rgb, tmp_path / "a.ppm")
    np.testing.assert_allclose(plotting.read_ppm(tmp_path / "a.ppm"), rgb, atol=1 / 255)


def test_grid_raster_draws_lines():
    ident = np.stack(np.meshgrid(np.arange(10.0), np.arange(10.0), indexing="ij"), -1)
    rgb = plotting.deformation_grid_rgb(ident, np.zeros((10, 10)))
    assert rgb.shape[2] == 3 and rgb.max() > 0
