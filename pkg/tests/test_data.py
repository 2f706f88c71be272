import json
import logging

import numpy as np
import pytest
from PIL import Image

from smokenet import data
from smokenet.data import (
    AugmentConfig,
    ManifestError,
    Sample,
    SampleError,
    SampleRef,
    apply_fog,
    apply_motion_blur,
    augment,
    load_manifest,
    load_sample,
    make_batches,
    motion_blur_kernel,
    sample_rng,
)


def _png(path, array, mode):
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode=mode).save(path)
    return path


def _ref(tmp_path, image, mask, sid="s"):
    ip = _png(tmp_path / f"{sid}_img.png", image, "RGB")
    mp = _png(tmp_path / f"{sid}_mask.png", mask, "L")
    return SampleRef(sid, ip, mp, "train")


# manifest ----------------------------------------------------------------------------
def test_manifest_splits(toy_dataset):
    refs = load_manifest(toy_dataset)
    assert len(refs) == 6
    assert [r.split for r in refs].count("train") == 4
    assert len(load_manifest(toy_dataset, "val")) == 1
    assert all(r.image_path.is_absolute() for r in refs)


def test_manifest_missing_field_reports_line(tmp_path):
    _png(tmp_path / "a.png", np.zeros((4, 4, 3)), "RGB")
    lines = [
        {"image_path": "a.png", "mask_path": "a.png", "split": "train"},
        {"image_path": "a.png", "mask_path": "a.png", "split": "train", "id": "b"},
        {"image_path": "a.png", "split": "train"},
    ]
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in lines))
    with pytest.raises(ManifestError, match="line 3: missing mask_path"):
        load_manifest(tmp_path / "m.jsonl")


def test_manifest_missing_file_and_malformed(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"image_path": "x.png", "mask_path": "y.png", "split": "train"}\nnot json\n')
    with pytest.raises(ManifestError) as info:
        load_manifest(tmp_path / "m.jsonl")
    assert "line 1: no such file" in str(info.value)
    assert "line 2: malformed" in str(info.value)


def test_manifest_unreadable(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.jsonl")


def test_duplicate_ids_warn_and_keep_both(tmp_path, caplog):
    _png(tmp_path / "a.png", np.zeros((4, 4, 3)), "RGB")
    rec = json.dumps({"id": "dup", "image_path": "a.png", "mask_path": "a.png", "split": "train"})
    (tmp_path / "m.jsonl").write_text(rec + "\n" + rec + "\n")
    with caplog.at_level(logging.WARNING):
        refs = load_manifest(tmp_path / "m.jsonl")
    assert len(refs) == 2
    assert "duplicate id 'dup'" in caplog.text


# raster loading ----------------------------------------------------------------------
def test_mask_threshold_at_128(tmp_path):
    mask = np.array([[0, 127], [128, 255]])
    s = load_sample(_ref(tmp_path, np.zeros((2, 2, 3)), mask), size=(2, 2))
    np.testing.assert_array_equal(s.mask[0], [[0, 0], [1, 1]])


def test_all_white_mask_is_ones(tmp_path):
    s = load_sample(_ref(tmp_path, np.zeros((8, 8, 3)), np.full((8, 8), 255)), size=(8, 8))
    assert s.mask.shape == (1, 8, 8) and np.all(s.mask == 1.0)


def test_small_raster_exact(tmp_path):
    img = np.arange(48).reshape(4, 4, 3) * 5
    s = load_sample(_ref(tmp_path, img, np.zeros((4, 4))), size=(4, 4))
    np.testing.assert_array_equal(s.image, img.transpose(2, 0, 1) / 255.0)


def test_resize_keeps_mask_binary(tmp_path):
    mask = np.zeros((10, 14))
    mask[3:7, 4:11] = 255
    s = load_sample(_ref(tmp_path, np.full((10, 14, 3), 90), mask), size=(16, 32))
    assert s.image.shape == (3, 16, 32)
    assert set(np.unique(s.mask)) == {0.0, 1.0}


def test_image_mask_size_mismatch(tmp_path):
    with pytest.raises(SampleError, match="size"):
        load_sample(_ref(tmp_path, np.zeros((4, 4, 3)), np.zeros((4, 5))))


def test_undecodable_raster(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    ref = SampleRef("bad", tmp_path / "bad.png", tmp_path / "bad.png", "train")
    with pytest.raises(SampleError, match="decode"):
        load_sample(ref)


# photometric -------------------------------------------------------------------------
def test_fog_endpoints_and_value():
    img = np.random.default_rng(0).random((3, 4, 4))
    np.testing.assert_array_equal(apply_fog(img, 0.0), img)
    np.testing.assert_allclose(apply_fog(img, 1.0), np.broadcast_to(np.array([0.9] * 3).reshape(3, 1, 1), img.shape))
    px = np.array([0.2, 0.4, 0.6]).reshape(3, 1, 1)
    np.testing.assert_allclose(apply_fog(px, 0.5).ravel(), [0.55, 0.65, 0.75], rtol=1e-15)


def test_fog_moves_monotonically_toward_colour():
    img = np.random.default_rng(1).random((3, 4, 4))
    dists = [np.abs(apply_fog(img, a) - 0.9).sum() for a in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(dists, dists[1:]))
    with pytest.raises(ValueError):
        apply_fog(img, 1.5)


def test_blur_identity_and_constant():
    img = np.random.default_rng(2).random((3, 9, 9))
    np.testing.assert_array_equal(apply_motion_blur(img, 1, 37.0), img)
    const = np.full((3, 9, 9), 0.3)
    np.testing.assert_allclose(apply_motion_blur(const, 5, 60.0), const, rtol=1e-15)


def test_blur_impulse_horizontal():
    img = np.zeros((1, 5, 5))
    img[0, 2, 2] = 1.0
    out = apply_motion_blur(img, 3, 0.0)[0]
    np.testing.assert_allclose(out[2, 1:4], 1 / 3, rtol=1e-15)
    assert out.sum() == pytest.approx(1.0)
    assert np.count_nonzero(out) == 3


@pytest.mark.parametrize("length", [3, 5, 7])
@pytest.mark.parametrize("angle", [0.0, 30.0, 45.0, 90.0, 135.0])
def test_blur_kernel_has_length_taps(length, angle):
    k = motion_blur_kernel(length, angle)
    assert np.count_nonzero(k) == length
    assert k.sum() == pytest.approx(1.0, abs=1e-15)


def test_blur_even_length_rejected():
    with pytest.raises(ValueError):
        motion_blur_kernel(4, 0.0)


# augmentation ------------------------------------------------------------------------
def _sample(seed=0, size=16):
    r = np.random.default_rng(seed)
    mask = (r.random((1, size, size)) > 0.6).astype(float)
    return Sample(r.random((3, size, size)), mask, f"s{seed}")


def test_disabled_augmentation_is_identity():
    s = _sample()
    out = augment(s, AugmentConfig.disabled())
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)
    assert out.augmentation_log == []


def test_double_hflip_is_identity():
    cfg = AugmentConfig(hflip_p=1, vflip_p=0, rotation_p=0, brightness_p=0, fog_p=0, blur_p=0)
    s = _sample()
    twice = augment(augment(s, cfg), cfg)
    np.testing.assert_array_equal(twice.image, s.image)
    assert [e["op"] for e in twice.augmentation_log] == ["hflip", "hflip"]


def test_augment_deterministic_per_seed_id_epoch():
    s = _sample()
    cfg = AugmentConfig(seed=5)
    a = augment(s, cfg, sample_rng(5, s.id, 3))
    b = augment(s, cfg, sample_rng(5, s.id, 3))
    np.testing.assert_array_equal(a.image, b.image)
    assert a.augmentation_log == b.augmentation_log
    logs = {json.dumps(augment(s, cfg, sample_rng(5, s.id, e)).augmentation_log) for e in range(10)}
    assert len(logs) > 1


def test_augmented_mask_stays_binary_and_in_range():
    cfg = AugmentConfig(hflip_p=0.5, vflip_p=0.5, rotation_p=1, brightness_p=1, fog_p=1, blur_p=1)
    for seed in range(20):
        out = augment(_sample(seed), cfg, np.random.default_rng(seed))
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_geometric_ops_keep_image_and_mask_aligned():
    # the mask is derived from the image, so alignment means the relation survives
    r = np.random.default_rng(9)
    img = r.random((3, 12, 12))
    s = Sample(img, (img[:1] > 0.5).astype(float), "aligned")
    cfg = AugmentConfig(hflip_p=0.5, vflip_p=0.5, rotation_p=0, brightness_p=0, fog_p=0, blur_p=0)
    for seed in range(16):
        out = augment(s, cfg, np.random.default_rng(seed))
        np.testing.assert_array_equal(out.mask, (out.image[:1] > 0.5).astype(float))
    for k in range(4):
        ri, rm = data.rotate(s.image, s.mask, 90 * k)
        np.testing.assert_array_equal(rm, (ri[:1] > 0.5).astype(float))


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(fog_p=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(blur_lengths=(3, 4))


# batching ----------------------------------------------------------------------------
def test_batches_last_short():
    samples = [_sample(i, 8) for i in range(10)]
    sizes = [x.shape[0] for x, _ in make_batches(samples, 8)]
    assert sizes == [8, 2]


def test_batches_shuffle_deterministic():
    samples = [_sample(i, 8) for i in range(10)]
    a = [x.data for x, _ in make_batches(samples, 3, shuffle_seed=[1, 2])]
    b = [x.data for x, _ in make_batches(samples, 3, shuffle_seed=[1, 2])]
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    plain = np.concatenate([x.data for x, _ in make_batches(samples, 3)])
    assert not np.array_equal(np.concatenate(a), plain)


def test_batches_empty_and_bad_size():
    with pytest.raises(ValueError):
        next(make_batches([], 4))
    with pytest.raises(ValueError):
        next(make_batches([_sample()], 0))


def test_synthetic_round_trip_through_disk(tmp_path):
    samples = data.synthetic_samples(2, 64, seed=3)
    manifest = data.write_dataset(tmp_path, samples)
    loaded = [load_sample(r, (64, 64)) for r in load_manifest(manifest)]
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12
