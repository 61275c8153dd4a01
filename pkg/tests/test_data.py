import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cloudmask.data import (PatchSet, Raster, augment_flips, balance, extract_patches, flip_lr, load_raster,
                            save_raster, valid_centers)
from cloudmask.errors import DataError, FormatError
from cloudmask.synth import synth_scene


def random_raster(rng, w=40, h=36, c=4, labels=True):
    bands = rng.uniform(0, 1, (c, h, w)).astype(np.float32)
    lab = rng.integers(0, 2, (h, w)).astype(np.uint8) if labels else None
    return Raster(bands, lab)


def test_raster_round_trip(tmp_path, rng):
    r = random_raster(rng)
    save_raster(r, tmp_path / "a.mspc")
    back = load_raster(tmp_path / "a.mspc")
    assert back.bands.tobytes() == r.bands.tobytes()
    assert np.array_equal(back.labels, r.labels)


def test_raster_round_trip_without_labels(tmp_path, rng):
    r = random_raster(rng, labels=False)
    save_raster(r, tmp_path / "a.mspc")
    back = load_raster(tmp_path / "a.mspc")
    assert back.labels is None and back.bands.tobytes() == r.bands.tobytes()


def test_raster_layout_on_disk(tmp_path):
    bands = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    labels = np.arange(12, dtype=np.uint8).reshape(3, 4)
    save_raster(Raster(bands, labels), tmp_path / "a")
    blob = (tmp_path / "a").read_bytes()
    assert blob[:4] == b"MSP1"
    assert struct.unpack_from("<IIII", blob, 4) == (4, 3, 2, 1)
    assert np.array_equal(np.frombuffer(blob, "<f4", 24, 20), np.arange(24))
    assert list(blob[20 + 96:]) == list(range(12))


def test_raster_bad_magic(tmp_path, rng):
    save_raster(random_raster(rng), tmp_path / "a")
    blob = bytearray((tmp_path / "a").read_bytes())
    blob[:4] = b"XXXX"
    (tmp_path / "a").write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_raster(tmp_path / "a")


def test_raster_truncated_channels(tmp_path, rng):
    r = random_raster(rng, w=8, h=8, c=3, labels=False)
    header = struct.pack("<4sIIII", b"MSP1", 8, 8, 4, 0)
    (tmp_path / "a").write_bytes(header + r.bands.astype("<f4").tobytes())
    with pytest.raises(FormatError) as err:
        load_raster(tmp_path / "a")
    assert "1024" in str(err.value) and "768" in str(err.value)


def test_raster_label_flag_mismatch(tmp_path, rng):
    r = random_raster(rng, w=8, h=8)
    header = struct.pack("<4sIIII", b"MSP1", 8, 8, 4, 0)
    (tmp_path / "a").write_bytes(header + r.bands.tobytes() + r.labels.tobytes())
    with pytest.raises(FormatError, match="label"):
        load_raster(tmp_path / "a")


def test_valid_center_count():
    W, H = 50, 45
    r = Raster(np.zeros((4, H, W), np.float32), np.zeros((H, W), np.uint8))
    centers = valid_centers(r, 33)
    count = sum(1 for row in range(H) for col in range(W)
                if 16 <= row < H - 16 and 16 <= col < W - 16)
    assert len(centers) == count == (W - 32) * (H - 32)
    assert len(extract_patches(r, 33)) == (W - 32) * (H - 32)


def test_unlabeled_never_reaches_targets(rng):
    r = random_raster(rng, 40, 40)
    r.labels[20, 20] = 255
    pixel = extract_patches(r, 17, "pixel")
    assert 255 not in pixel.y and len(pixel) == 24 * 24 - 1
    patch = extract_patches(r, 17, "patch9")
    assert 255 not in patch.y and len(patch) == 24 * 24 - 81
    with pytest.raises(DataError):
        extract_patches(r, 17, "pixel", np.array([[20, 20]]))


def test_out_of_bounds_center(rng):
    r = random_raster(rng)
    with pytest.raises(DataError):
        extract_patches(r, 17, "pixel", np.array([[7, 20]]))


def test_patch_contents_and_target(rng):
    r = random_raster(rng)
    r.labels[18, 21] = 1
    ps = extract_patches(r, 17, "patch9", np.array([[18, 21]]), raster_id=3)
    assert np.array_equal(ps.x[0], r.bands[:, 10:27, 13:30])
    assert np.array_equal(ps.y[0], r.labels[14:23, 17:26])
    assert ps.center_labels[0] == 1
    sample = ps[0]
    assert sample.x.shape == (1, 4, 17, 17) and sample.source == (3, 18, 21)
    assert extract_patches(r, 17, "pixel", np.array([[18, 21]])).y[0] == 1


def test_symmetric_raster_patch_is_lr_symmetric():
    half = np.random.default_rng(0).uniform(0, 1, (4, 33, 17))
    bands = np.concatenate([half, half[:, :, -2::-1]], axis=2).astype(np.float32)
    r = Raster(bands, np.zeros((33, 33), np.uint8))
    x = extract_patches(r, 33, "pixel", np.array([[16, 16]])).x[0]
    assert np.array_equal(x, flip_lr(x))


def _samples(n_cloud, n_clear):
    y = np.array([1] * n_cloud + [0] * n_clear, dtype=np.uint8)
    x = np.arange(len(y), dtype=np.float32).reshape(-1, 1, 1, 1) * np.ones((1, 4, 3, 3), np.float32)
    return PatchSet(x, y, np.column_stack([np.zeros(len(y)), np.arange(len(y)), np.zeros(len(y))]).astype(int))


def test_balance_min_rule():
    b = balance(_samples(70, 30), seed=1)
    assert np.sum(b.y == 1) == np.sum(b.y == 0) == 30


def test_balance_already_balanced_reshuffles():
    s = _samples(20, 20)
    b = balance(s, seed=2)
    assert sorted(b.x[:, 0, 0, 0]) == sorted(s.x[:, 0, 0, 0])
    assert not np.array_equal(b.x, s.x)


def test_balance_deterministic():
    a, b = balance(_samples(50, 20), 9), balance(_samples(50, 20), 9)
    assert np.array_equal(a.x, b.x)


def test_balance_needs_both_classes():
    with pytest.raises(DataError):
        balance(_samples(10, 0), 0)


def test_balance_patch_mode_keys_on_center(rng):
    r = random_raster(rng, 40, 40)
    ps = balance(extract_patches(r, 17, "patch9"), 0)
    c = ps.y[:, 4, 4]
    assert np.sum(c == 0) == np.sum(c == 1)


def test_augment_triples_and_flips(rng):
    r = random_raster(rng, 40, 40)
    ps = balance(extract_patches(r, 17, "patch9"), 0).subset(slice(0, 100))
    aug = augment_flips(ps)
    assert len(aug) == 300
    n = len(ps)
    lr, ud = aug.subset(slice(n, 2 * n)), aug.subset(slice(2 * n, 3 * n))
    for j in range(9):
        assert np.array_equal(lr.y[:, :, j], ps.y[:, :, 8 - j])
        assert np.array_equal(ud.y[:, j, :], ps.y[:, 8 - j, :])
    assert np.array_equal(lr.x, ps.x[..., ::-1])
    assert np.array_equal(ud.x, ps.x[..., ::-1, :])
    assert np.array_equal(flip_lr(flip_lr(ps.x)), ps.x)
    # class proportions preserved
    assert np.sum(aug.center_labels) == 3 * np.sum(ps.center_labels)


def test_augment_pixel_targets_unchanged(rng):
    r = random_raster(rng, 40, 40)
    ps = extract_patches(r, 17, "pixel")
    aug = augment_flips(ps)
    assert np.array_equal(aug.y, np.tile(ps.y, 3))


def test_synth_no_clouds():
    assert synth_scene(64, 64, 0, cloud_fraction=0.0).labels.sum() == 0


def test_synth_deterministic():
    a, b = synth_scene(96, 80, 11), synth_scene(96, 80, 11)
    assert a.bands.tobytes() == b.bands.tobytes() and np.array_equal(a.labels, b.labels)
    assert a.bands.shape == (4, 80, 96)


def test_synth_cloud_fraction():
    fractions = [synth_scene(128, 128, s, cloud_fraction=0.5).labels.mean() for s in range(10)]
    assert all(0.4 <= f <= 0.6 for f in fractions)


def test_synth_rejects_small():
    with pytest.raises(DataError):
        synth_scene(32, 128, 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 0.99), st.floats(0.0, 0.2))
def test_synth_invariants(seed, fraction, noise):
    r = synth_scene(64, 64, seed, cloud_fraction=fraction, noise_level=noise)
    assert r.bands.min() >= 0 and r.bands.max() <= 2
    assert set(np.unique(r.labels)) == {0, 1}
