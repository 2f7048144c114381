import json

import numpy as np
import pytest

from msdiffeo import datasets
from msdiffeo.grid_image import load_image


def test_toy_pair_geometry():
    pair = datasets.make_toy_squares()
    src, tgt = pair.source, pair.target
    assert src.shape == tgt.shape == (50, 50)
    assert src.sum() == 20 * 20 + 16
    assert tgt.sum() == 20 * 20 - 8 + 16
    # the small square is shared, the large one moves by (-8, +8)
    np.testing.assert_array_equal(src[6:10, 6:10], tgt[6:10, 6:10])
    np.testing.assert_array_equal(src[20:40, 10:30], 1.0)
    np.testing.assert_array_equal(tgt[14:32, 18:38], 1.0)
    np.testing.assert_array_equal(tgt[12:14, 26:30], 0.0)
    # the roi encloses the notch
    roi = tgt[pair.roi.slices()]
    assert roi.shape == (6, 8) and np.sum(roi == 0) > 8


def test_toy_side_validation():
    with pytest.raises(ValueError):
        datasets.make_toy_squares(30)


def test_blob_population_is_deterministic_and_balanced():
    a = datasets.make_blob_population(4, seed=3)
    b = datasets.make_blob_population(4, seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    base = datasets.base_blob()
    assert not np.allclose(a[0], base)
    # antithetic pairs: the pair mean is closer to the base than either member
    pair_mean = 0.5 * (a[0] + a[1])
    assert np.sum((pair_mean - base) ** 2) < np.sum((a[0] - base) ** 2)


def test_zero_deformation_gives_copies():
    pop = datasets.make_blob_population(3, deform_scale=0.0)
    for img in pop:
        np.testing.assert_array_equal(img, datasets.base_blob())


def test_base_blob_range():
    b = datasets.base_blob((20, 24))
    assert b.shape == (20, 24)
    assert 0.0 <= b.min() < 0.01 and 0.99 < b.max() <= 1.0


def test_write_dataset(tmp_path):
    man = datasets.write_dataset(tmp_path, "toy")
    assert json.loads((tmp_path / "manifest.json").read_text()) == man
    src = load_image(tmp_path / "source.rawf")
    np.testing.assert_array_equal(src, datasets.make_toy_squares().source)
    np.testing.assert_array_equal(load_image(tmp_path / "target.pgm"), datasets.make_toy_squares().target)
    man = datasets.write_dataset(tmp_path / "b", "blobs", n=2, shape=(16, 16))
    assert [f["name"] for f in man["files"]] == ["blob_00", "blob_01"]
    with pytest.raises(ValueError):
        datasets.write_dataset(tmp_path, "nope")
