import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uapdefend import data, datagen
from uapdefend.errors import ValidationError


@pytest.fixture(scope="module")
def small_container(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "set"
    datagen.generate_dataset(path, n_per_class=10, seed=3)
    return path


def test_load_is_deterministic_given_seed(small_container):
    a = data.load_dataset(small_container, seed=11)
    b = data.load_dataset(small_container, seed=11)
    for name in data.SPLIT_NAMES:
        np.testing.assert_array_equal(a.splits[name], b.splits[name])
    c = data.load_dataset(small_container, seed=12)
    assert any(
        not np.array_equal(a.splits[n], c.splits[n]) for n in data.SPLIT_NAMES
    )


def test_split_sizes_exact():
    assert data.split_sizes(100, (0.4, 0.2, 0.2, 0.2)) == [40, 20, 20, 20]


@settings(max_examples=60, deadline=None)
@given(st.integers(4, 500), st.integers(0, 1000))
def test_splits_disjoint_and_exhaustive(n, seed):
    splits = data.assign_splits(n, (0.4, 0.2, 0.2, 0.2), seed)
    joined = np.concatenate([splits[name] for name in data.SPLIT_NAMES])
    assert len(joined) == n
    assert len(np.unique(joined)) == n


def test_empty_directory_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValidationError):
        data.load_dataset(tmp_path / "empty")


def test_png_layout_and_ragged_detection(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    for cls in ("alpha", "beta"):
        d = tmp_path / "pngs" / cls
        d.mkdir(parents=True)
        for i in range(4):
            arr = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i}.png")
    ds = data.load_dataset(tmp_path / "pngs", split_fractions=(0.5, 0.25, 0.125, 0.125))
    assert ds.images.shape == (8, 16, 16, 3)
    assert ds.class_names == ["alpha", "beta"]
    assert ds.num_classes == 2

    bad = rng.integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
    Image.fromarray(bad).save(tmp_path / "pngs" / "beta" / "zz_bad.png")
    with pytest.raises(ValidationError, match="ragged"):
        data.load_dataset(tmp_path / "pngs")


def test_corrupt_container_rejected(small_container, tmp_path):
    import shutil

    dest = tmp_path / "corrupt"
    shutil.copytree(small_container, dest)
    raw = bytearray((dest / "images.bin").read_bytes())
    raw[100] ^= 0x55
    (dest / "images.bin").write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="corrupted"):
        data.load_dataset(dest)


def test_corner_crops_degenerate_and_indexing():
    img = np.arange(4 * 4 * 3, dtype=np.float32).reshape(4, 4, 3)
    crops = data.corner_crops(img, (4, 4))
    assert len(crops) == 5
    for c in crops:
        np.testing.assert_array_equal(c, img)

    crops = data.corner_crops(img, (2, 2))
    np.testing.assert_array_equal(crops[0], img[0:2, 0:2])
    np.testing.assert_array_equal(crops[1], img[0:2, 2:4])
    np.testing.assert_array_equal(crops[2], img[2:4, 0:2])
    np.testing.assert_array_equal(crops[3], img[2:4, 2:4])
    np.testing.assert_array_equal(crops[4], img[1:3, 1:3])

    with pytest.raises(ValidationError):
        data.corner_crops(img, (5, 5))


def test_five_corner_crops_at_a_larger_scale():
    img = np.zeros((256, 256, 3), dtype=np.float32)
    crops = data.corner_crops(img, (224, 224))
    assert len(crops) == 5
    assert all(c.shape == (224, 224, 3) for c in crops)


def test_norm_stats_constant_images():
    imgs = np.full((7, 32, 32, 3), 255.0, dtype=np.float32)
    stats = data.norm_stats(imgs)
    assert stats.mean_l2 == pytest.approx(255.0 * math.sqrt(3072), rel=1e-9)
    assert stats.mean_linf == pytest.approx(255.0)
    assert data.xi_for("l2", stats) == pytest.approx(0.04 * 255.0 * math.sqrt(3072), rel=1e-9)


def test_xi_linf_matches_four_percent_of_peak():
    stats = data.NormStats(mean_l2=1000.0, mean_linf=255.0)
    assert data.xi_for("linf", stats) == pytest.approx(10.2)


def test_norm_stats_singleton():
    rng = np.random.default_rng(5)
    img = rng.random((1, 8, 8, 3)).astype(np.float32) * 255
    stats = data.norm_stats(img)
    assert stats.mean_l2 == pytest.approx(float(np.linalg.norm(img.astype(np.float64).ravel())))
    assert stats.mean_linf == pytest.approx(float(np.abs(img).max()))


def test_norm_stats_empty_split_rejected():
    with pytest.raises(ValidationError):
        data.norm_stats(np.zeros((0, 8, 8, 3), dtype=np.float32))


def test_apply_perturbation_clamps_by_default():
    img = np.array([[[[250.0, 5.0, 100.0]]]], dtype=np.float32)
    rho = np.array([[[10.0, -10.0, 1.0]]], dtype=np.float32)
    out = data.apply_perturbation(img, rho)
    np.testing.assert_array_equal(out.ravel(), [255.0, 0.0, 101.0])
    raw = data.apply_perturbation(img, rho, clamp=False)
    np.testing.assert_array_equal(raw.ravel(), [260.0, -5.0, 101.0])
