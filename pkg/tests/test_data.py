import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdanet.data import (CIFAR_MEAN, CIFAR_STD, DEFAULT_FACTORS, RECORD_BYTES, FormatError, ImageSet, LabeledImage,
                         ScaleSweepSet, augment, bilinear_resize, center_crop, decode_cifar10, denormalize, hflip,
                         load_cifar10, normalize, random_crop_flip, rescale_center_crop, sweep_factors,
                         synth_multiscale)


def cifar_record(label, fill):
    return bytes([label]) + bytes([fill]) * (RECORD_BYTES - 1)


# -- CIFAR-10 --------------------------------------------------------------

def test_decode_single_record(tmp_path):
    path = tmp_path / "test_batch.bin"
    path.write_bytes(cifar_record(7, 128))
    data = load_cifar10(path, "test")
    assert len(data) == 1 and data[0].label == 7
    assert data[0].pixels.shape == (32, 32, 3)
    np.testing.assert_allclose(data[0].pixels, 128 / 255, rtol=1e-6)


def test_decode_channel_layout():
    raw = bytearray(cifar_record(3, 0))
    raw[1] = 10                 # red plane, pixel (0, 0)
    raw[1 + 1024 + 33] = 20     # green plane, pixel (1, 1)
    images, labels = decode_cifar10(bytes(raw))
    assert labels.tolist() == [3]
    assert images[0, 0, 0].tolist() == [10, 0, 0]
    assert images[0, 1, 1].tolist() == [0, 20, 0]


def test_decode_bad_length():
    with pytest.raises(FormatError):
        decode_cifar10(b"\0" * 3074)


def test_decode_bad_label():
    with pytest.raises(FormatError):
        decode_cifar10(cifar_record(11, 0))


def test_train_split_needs_five_batches(tmp_path):
    (tmp_path / "data_batch_1.bin").write_bytes(cifar_record(1, 1))
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path, "train")
    for i in range(2, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(cifar_record(i, i))
    assert load_cifar10(tmp_path, "train").labels.tolist() == [1, 2, 3, 4, 5]


@pytest.mark.skipif(not os.environ.get("SDA_DATA_DIR"), reason="SDA_DATA_DIR not set (real CIFAR-10 absent)")
def test_real_test_batch_histogram():
    data = load_cifar10(os.environ["SDA_DATA_DIR"], "test")
    assert len(data) == 10000
    assert np.bincount(data.labels, minlength=10).tolist() == [1000] * 10


def test_normalize_round_trip():
    x = np.random.default_rng(0).uniform(size=(2, 4, 4, 3)).astype(np.float32)
    z = normalize(x)
    np.testing.assert_allclose(z[0, 0, 0], (x[0, 0, 0] - CIFAR_MEAN) / np.array(CIFAR_STD), rtol=1e-5)
    np.testing.assert_allclose(denormalize(z), x, atol=1e-6)


# -- synthetic shapes ------------------------------------------------------

def test_synth_deterministic():
    a = synth_multiscale(12, 1.0, seed=5)
    b = synth_multiscale(12, 1.0, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tolist() == b.labels.tolist()
    assert synth_multiscale(12, 1.0, seed=6).images.tobytes() != a.images.tobytes()


def test_synth_scale_bounds():
    with pytest.raises(ValueError):
        synth_multiscale(4, 0.0, seed=0)
    with pytest.raises(ValueError):
        synth_multiscale(4, 2.6, seed=0)
    assert len(synth_multiscale(4, 0.1, seed=0)) == 4
    assert len(synth_multiscale(4, 2.5, seed=0)) == 4


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 60), st.integers(0, 1000))
def test_synth_class_balance(count, seed):
    data = synth_multiscale(count, (0.5, 1.5), seed=seed)
    hist = np.bincount(data.labels, minlength=4)
    assert np.all(np.abs(hist - count / 4) <= 1)
    assert data.images.min() >= 0 and data.images.max() <= 1


def test_synth_object_area_grows_with_scale():
    small = synth_multiscale(8, 0.5, seed=1, return_masks=True)[1].sum(axis=(1, 2))
    large = synth_multiscale(8, 2.0, seed=1, return_masks=True)[1].sum(axis=(1, 2))
    assert np.all(large > 4 * small)


# -- augmentation ----------------------------------------------------------

def test_augment_eval_identity():
    img = synth_multiscale(1, 1.0, seed=2)[0]
    out = augment(img, "eval", seed=0)
    assert out.pixels is img.pixels


def test_flip_involution():
    x = np.random.default_rng(3).uniform(size=(5, 6, 3))
    np.testing.assert_array_equal(hflip(hflip(x)), x)


def test_augment_train_deterministic():
    img = synth_multiscale(1, 1.0, seed=2)[0]
    a, b = augment(img, "train", seed=9), augment(img, "train", seed=9)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    with pytest.raises(ValueError):
        augment(img, "wild", seed=0)


def test_random_crop_zero_offset_is_identity_or_flip():
    x = np.random.default_rng(4).uniform(size=(16, 8, 8, 3)).astype(np.float32)
    out = random_crop_flip(x, np.random.default_rng(0), pad=0)
    for a, b in zip(x, out):
        assert np.array_equal(a, b) or np.array_equal(a[:, ::-1], b)


# -- rescaling -------------------------------------------------------------

def scalar_bilinear(img, oh, ow):
    h, w = img.shape[:2]
    out = np.zeros((oh, ow) + img.shape[2:])
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(sy)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(sx)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def checkerboard(n):
    return ((np.arange(n)[:, None] + np.arange(n)[None, :]) % 2).astype(np.float32)[..., None].repeat(3, -1)


def test_rescale_identity():
    img = LabeledImage(np.random.default_rng(5).uniform(size=(8, 8, 3)).astype(np.float32), 1)
    out = rescale_center_crop(img, 1.0, 8)
    np.testing.assert_array_equal(out.pixels, img.pixels)
    assert out.label == 1


def test_rescale_checkerboard_x2_oracle():
    img = LabeledImage(checkerboard(4), 0)
    full = rescale_center_crop(img, 2.0, 8).pixels
    np.testing.assert_allclose(full, scalar_bilinear(img.pixels, 8, 8), atol=1e-6)
    assert full[0, 0, 0] == 0.0
    assert full[1, 1, 0] == pytest.approx(0.375)
    crop = rescale_center_crop(img, 2.0, 4).pixels
    np.testing.assert_allclose(crop, full[2:6, 2:6], atol=1e-6)


def test_rescale_half_with_padding():
    x = np.random.default_rng(6).uniform(size=(8, 8, 3)).astype(np.float32)
    out = rescale_center_crop(LabeledImage(x, 0), 0.5, 8).pixels
    box = x.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(out[2:6, 2:6], box, atol=1e-6)
    # edge replication around the centre
    np.testing.assert_allclose(out[0, 2:6], box[0], atol=1e-6)
    np.testing.assert_allclose(out[2:6, 7], box[:, 3], atol=1e-6)


def test_bilinear_matches_scalar_random():
    x = np.random.default_rng(7).uniform(size=(5, 7, 3)).astype(np.float32)
    for oh, ow in ((3, 4), (9, 11), (5, 7)):
        np.testing.assert_allclose(bilinear_resize(x, oh, ow), scalar_bilinear(x, oh, ow), atol=1e-5)


def test_center_crop_odd_padding():
    x = np.arange(9, dtype=np.float32).reshape(3, 3)
    out = center_crop(x, 4)
    assert out.shape == (4, 4)
    np.testing.assert_array_equal(out[:3, :3], x)


def test_sweep_set():
    base = synth_multiscale(4, 1.0, seed=8)
    sweep = ScaleSweepSet(base)
    assert sweep.factors == DEFAULT_FACTORS and sweep.factors[0] == 0.14 and sweep.factors[-1] == 2.0
    at = sweep.at(0.5)
    assert isinstance(at, ImageSet) and at.images.shape == base.images.shape
    assert at.labels.tolist() == base.labels.tolist()
    with pytest.raises(ValueError):
        ScaleSweepSet(base, (1.0, 0.5))
    assert sweep_factors(0.14, 2.0) == DEFAULT_FACTORS
    assert sweep_factors(0.5, 1.0) == (0.5, 0.55, 0.7, 0.85, 1.0)
