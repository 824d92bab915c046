import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from diffgan import data as Dt
from diffgan import tensor as T
from diffgan.errors import ArgumentError, ConfigError, DatasetError


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


@pytest.fixture
def folder(tmp_path):
    r = np.random.default_rng(0)
    for cls in ("batik_a", "batik_b", "batik_c"):
        for k in range(2):
            write_png(tmp_path / cls / f"{k}.png", r.integers(0, 256, (64, 64, 3)))
    return tmp_path


# ---------------------------------------------------------------- loading

def test_load_folder_counts(folder):
    ds = Dt.load_image_folder(folder, 32)
    assert len(ds) == 6 and ds.images.shape == (6, 3, 32, 32)
    assert ds.histogram() == {"batik_a": 2, "batik_b": 2, "batik_c": 2}


def test_load_white_png(tmp_path):
    write_png(tmp_path / "c" / "w.png", np.full((10, 10, 3), 255))
    ds = Dt.load_image_folder(tmp_path, 8)
    assert np.all(ds.images == 1.0)


def test_load_deterministic(folder):
    a, b = Dt.load_image_folder(folder, 16), Dt.load_image_folder(folder, 16)
    assert a.images.tobytes() == b.images.tobytes() and a.labels == b.labels


def test_load_skips_unreadable(folder, caplog):
    (folder / "batik_a" / "broken.png").write_bytes(b"not an image")
    with caplog.at_level(logging.WARNING):
        ds = Dt.load_image_folder(folder, 16)
    assert len(ds) == 6 and ds.meta["skipped"] == 1
    assert "broken.png" in caplog.text


def test_load_empty_dir(tmp_path):
    with pytest.raises(DatasetError):
        Dt.load_image_folder(tmp_path, 16)
    with pytest.raises(DatasetError):
        Dt.load_image_folder(tmp_path / "missing", 16)


def test_resize_upsample_agrees_with_pillow():
    src = np.random.default_rng(1).integers(0, 256, (5, 7)).astype(np.uint8)
    sq = src[:, 1:6]
    ours = Dt.resize_bilinear(sq[None].astype(np.float64), 13)[0]
    pil = np.asarray(Image.fromarray(sq).resize((13, 13), Image.Resampling.BILINEAR), dtype=float)
    assert np.max(np.abs(ours - pil)) <= 1.0


def test_resize_halving_is_block_mean():
    x = np.random.default_rng(2).normal(size=(2, 8, 8))
    want = x.reshape(2, 4, 2, 4, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(Dt.resize_bilinear(x, 4), want, rtol=1e-12)


# ---------------------------------------------------------------- augmentation

def test_augment_identity():
    x = T.Rng(0).uniform((3, 8, 8)) * 2 - 1
    assert Dt.augment(x, Dt.AugmentConfig.identity(), T.Rng(1)).tobytes() == x.tobytes()


def test_hflip_involution():
    x = T.Rng(0).uniform((3, 6, 6)) * 2 - 1
    cfg = Dt.AugmentConfig(crop=(1, 1), hflip=1.0, vflip=0.0, hue_deg=0, brightness=0, contrast=(1, 1))
    once = Dt.augment(x, cfg, T.Rng(1))
    np.testing.assert_array_equal(once, x[:, :, ::-1])
    np.testing.assert_array_equal(Dt.augment(once, cfg, T.Rng(2)), x)


def test_vflip_example():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]]) / 4
    cfg = Dt.AugmentConfig(crop=(1, 1), hflip=0.0, vflip=1.0, hue_deg=0, brightness=0, contrast=(1, 1))
    np.testing.assert_array_equal(Dt.augment(x, cfg, T.Rng(0)), np.array([[[3.0, 4.0], [1.0, 2.0]]]) / 4)


def test_hue_rotation_preserves_gray():
    m = Dt.hue_rotation_matrix(30)
    np.testing.assert_allclose(m @ np.ones(3), np.ones(3), rtol=1e-12)
    np.testing.assert_allclose(Dt.hue_rotation_matrix(30) @ Dt.hue_rotation_matrix(-30), np.eye(3),
                               atol=1e-12)


@settings(max_examples=40)
@given(seed=st.integers(0, 2 ** 31), ch=st.sampled_from([1, 3]), r=st.integers(2, 12))
def test_augment_range_shape_determinism(seed, ch, r):
    x = (T.Rng(seed).uniform((ch, r, r)) * 2 - 1).astype(np.float32)
    cfg = Dt.AugmentConfig(brightness=0.5, contrast=(0.5, 2.0))
    a = Dt.augment(x, cfg, T.Rng(seed, 7))
    b = Dt.augment(x, cfg, T.Rng(seed, 7))
    assert a.shape == x.shape and a.dtype == x.dtype
    assert a.min() >= -1 and a.max() <= 1
    assert a.tobytes() == b.tobytes()


def test_augment_config_validation():
    with pytest.raises(ConfigError):
        Dt.AugmentConfig(crop=(0.0, 1.0))
    with pytest.raises(ConfigError):
        Dt.AugmentConfig(hflip=1.5)


# ---------------------------------------------------------------- balancing

def labelled(counts, r=4):
    imgs, labels = [], []
    for name, k in counts.items():
        imgs.append(np.full((k, 3, r, r), 0.1, dtype=np.float32))
        labels += [name] * k
    return Dt.ImageDataset(np.concatenate(imgs), labels)


def test_balance_400_to_1000():
    ds = labelled({"a": 400})
    out = Dt.balance_classes(ds, 1000, Dt.AugmentConfig(), T.Rng(0))
    assert out.histogram() == {"a": 1000}
    np.testing.assert_array_equal(out.images[:400], ds.images)


def test_balance_at_target_unchanged():
    ds = labelled({"a": 1000})
    out = Dt.balance_classes(ds, 1000, Dt.AugmentConfig(), T.Rng(0))
    assert out.images.tobytes() == ds.images.tobytes()


def test_balance_twenty_classes_reach_twenty_thousand():
    ds = labelled({f"motif{k:02d}": 1 + 37 * k for k in range(20)}, r=2)
    out = Dt.balance_classes(ds, 1000, Dt.AugmentConfig(), T.Rng(0))
    assert len(out) == 20000
    assert set(out.histogram().values()) == {1000}


def test_balance_errors():
    ds = labelled({"a": 5, "b": 2})
    with pytest.raises(DatasetError, match="'a'"):
        Dt.balance_classes(ds, 3, Dt.AugmentConfig(), T.Rng(0))
    out = Dt.balance_classes(ds, 3, Dt.AugmentConfig(), T.Rng(0), truncate=True)
    assert out.histogram() == {"a": 3, "b": 3}
    ds.meta["classes"] = ["a", "b", "empty"]
    with pytest.raises(DatasetError, match="empty"):
        Dt.balance_classes(ds, 5, Dt.AugmentConfig(), T.Rng(0))


# ---------------------------------------------------------------- toys

def test_grid_zero_std_on_centers():
    ds = Dt.synth_gaussian_grid(500, 5, 2.0, 0.0, T.Rng(0))
    pts = ds.images.reshape(-1, 2)
    c = Dt.grid_centers(5, 2.0)
    d = np.min(np.linalg.norm(pts[:, None] - c[None], axis=2), axis=1)
    assert np.all(d == 0)


def test_grid_mode_balance_and_symmetry():
    n = 100_000
    ds = Dt.synth_gaussian_grid(n, 5, 2.0, 0.05, T.Rng(1))
    pts = ds.images.reshape(-1, 2).astype(np.float64)
    c = Dt.grid_centers(5, 2.0)
    nearest = np.argmin(np.linalg.norm(pts[:, None] - c[None], axis=2), axis=1)
    counts = np.bincount(nearest, minlength=25)
    assert np.all(np.abs(counts / (n / 25) - 1) < 0.05)
    se = pts.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(pts.mean(axis=0)) < 3 * se)


def test_grid_too_few_points():
    with pytest.raises(ArgumentError):
        Dt.synth_gaussian_grid(10, 5)


@pytest.mark.parametrize("res", [28, 32, 64])
def test_motif_four_fold_symmetry(res):
    ds = Dt.synth_motif(20, res, T.Rng(3))
    for img in ds.images:
        np.testing.assert_array_equal(np.rot90(img, 1, axes=(1, 2)), img)


def test_motif_deterministic_and_range():
    a = Dt.synth_motif(30, 28, T.Rng(4), channels=3)
    b = Dt.synth_motif(30, 28, T.Rng(4), channels=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.min() >= -1 and a.images.max() <= 1


def test_motif_bad_resolution():
    with pytest.raises(ArgumentError):
        Dt.synth_motif(2, 30)


def test_motif_generation_budget():
    import time
    t0 = time.perf_counter()
    Dt.synth_motif(2000, 28, T.Rng(0))
    assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------------------- cache

def test_cache_roundtrip(tmp_path):
    ds = labelled({"x": 3, "y": 2})
    ds.meta["classes"] = ["x", "y"]
    Dt.save_dataset(ds, tmp_path / "ds")
    back = Dt.load_dataset(tmp_path / "ds.json")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels == ds.labels
    import json
    doc = json.loads((tmp_path / "ds.json").read_text())
    assert {"n": 5, "channels": 3, "resolution": 4, "classes": ["x", "y"]}.items() <= doc.items()
    raw = (tmp_path / "ds.bin").read_bytes()
    assert np.frombuffer(raw, "<f4")[0] == np.float32(0.1)


def test_cache_truncated(tmp_path):
    Dt.save_dataset(labelled({"x": 2}), tmp_path / "ds")
    blob = tmp_path / "ds.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DatasetError):
        Dt.load_dataset(tmp_path / "ds")


def test_cache_missing(tmp_path):
    with pytest.raises(DatasetError):
        Dt.load_dataset(tmp_path / "nothing")
