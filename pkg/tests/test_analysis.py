import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdanet.analysis import (CamHeatmap, ScaleSweepReport, SweepRow, attention_sweep, cam_from_gradients,
                             collect_attention, grad_cam, ppm_bytes, read_csv, read_ppm, write_csv, write_ppm)
from sdanet.cli import scale_width
from sdanet.data import LabeledImage, ScaleSweepSet, synth_multiscale
from sdanet.model import build, preset


def tiny_model(seed=0, mode=None):
    spec = scale_width(preset("sda-tiny-cifar", num_classes=4), 4)
    return build(spec.with_sda(mode) if mode else spec, seed=seed)


# -- attention sweep -------------------------------------------------------

def test_untrained_sweep_is_uniform():
    model = tiny_model()
    data = synth_multiscale(6, 1.0, seed=0, size=16)
    report = attention_sweep(model, ScaleSweepSet(data, (0.5, 1.0, 2.0)))
    assert report.stages() == [1, 2, 3]
    for row in report.rows:
        m = len(report.blocks(row.stage))
        assert row.mean == pytest.approx(1 / m, abs=1e-7)
        assert row.variance == pytest.approx(0.0, abs=1e-12)
        assert row.n == 6
    assert all(v == 0.0 for v in report.trend(2).values())


def test_collect_attention_sums_to_one():
    model = tiny_model()
    rng = np.random.default_rng(1)
    for st_ in model.stages:
        if st_.sda is not None:
            st_.sda.w2.weight.data[...] = rng.standard_normal(st_.sda.w2.weight.shape)
    data = synth_multiscale(1, 1.0, seed=2, size=16)
    for stage, s in collect_attention(model, data).items():
        assert s.shape[0] == 1
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-5)


def test_sweep_requires_sda():
    model = tiny_model(mode="off")
    with pytest.raises(ValueError):
        attention_sweep(model, ScaleSweepSet(synth_multiscale(2, 1.0, seed=0, size=16), (1.0,)))


def test_trend_signs():
    rep = ScaleSweepReport()
    for s in (0.5, 1.0, 1.5, 2.0):
        rep.rows.append(SweepRow(s, 2, 1, 1 - s / 4, 0.0, 1))
        rep.rows.append(SweepRow(s, 2, 2, s / 4, 0.0, 1))
    trend = rep.trend(2)
    assert trend[1] == pytest.approx(-1.0) and trend[2] == pytest.approx(1.0)


# -- Grad-CAM --------------------------------------------------------------

def test_cam_zero_gradient():
    acts = np.random.default_rng(0).uniform(size=(3, 3, 4))
    np.testing.assert_array_equal(cam_from_gradients(acts, np.zeros_like(acts)), 0)


def test_cam_single_channel_closed_form():
    acts = np.array([[1.0, -2.0], [3.0, 0.5]])[..., None]
    grads = np.full_like(acts, 0.25)
    np.testing.assert_allclose(cam_from_gradients(acts, grads), [[1 / 3, 0], [1, 0.5 / 3]], rtol=1e-6)
    # negative mean gradient flips the sign before the relu
    np.testing.assert_allclose(cam_from_gradients(acts, -grads), [[0, 1], [0, 0]], rtol=1e-6)


def test_cam_two_channel_hand_oracle():
    a = np.zeros((2, 2, 2))
    a[..., 0] = [[1, 0], [0, 2]]
    a[..., 1] = [[0, 4], [1, 0]]
    g = np.zeros((2, 2, 2))
    g[..., 0] = [[1, 1], [1, 1]]       # weight 1
    g[..., 1] = [[-2, 0], [0, 0]]      # weight -0.5
    # raw = relu([[1, -2], [-0.5, 2]]) = [[1, 0], [0, 2]]
    np.testing.assert_allclose(cam_from_gradients(a, g), [[0.5, 0], [0, 1]], rtol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_cam_range_and_scale_invariance(h, c, k, seed):
    rng = np.random.default_rng(seed)
    acts = rng.standard_normal((h, h, c))
    grads = rng.standard_normal((h, h, c))
    cam = cam_from_gradients(acts, grads)
    assert cam.min() >= 0 and cam.max() <= 1
    assert cam.max() in (0.0, 1.0) or np.isclose(cam.max(), 1.0)
    np.testing.assert_allclose(cam_from_gradients(acts, k * grads), cam, atol=1e-5)
    if cam.max() > 0:
        assert np.argmax(cam_from_gradients(k * acts, grads)) == np.argmax(cam)


def test_grad_cam_model():
    model = tiny_model(seed=3)
    img = synth_multiscale(1, 1.5, seed=4, size=16)[0]
    heat = grad_cam(model, img, 1, 2)
    assert heat.values.shape == (16, 16) and heat.class_index == 1
    assert 0 <= heat.values.min() and heat.values.max() <= 1
    assert 0 < heat.score < 1
    again = grad_cam(model, img, 1, 2)
    assert heat.values.tobytes() == again.values.tobytes()
    assert model.training


def test_grad_cam_zero_classifier_gives_zero_map():
    model = tiny_model(seed=3)
    model.fc.weight.data[...] = 0
    img = synth_multiscale(1, 1.0, seed=5, size=16)[0]
    np.testing.assert_array_equal(grad_cam(model, img, 0, 3).values, 0)


def test_grad_cam_bad_indices():
    model = tiny_model()
    img = synth_multiscale(1, 1.0, seed=5, size=16)[0]
    with pytest.raises(ValueError):
        grad_cam(model, img, 4, 2)
    with pytest.raises(ValueError):
        grad_cam(model, img, 0, 4)


# -- CSV -------------------------------------------------------------------

def test_empty_report_header_only(tmp_path):
    path = write_csv(ScaleSweepReport(), tmp_path / "a.csv")
    assert path.read_text() == "scale,stage,block,mean,variance,n\n"


def test_report_round_trip_and_order(tmp_path):
    rep = ScaleSweepReport([SweepRow(1.0, 2, 2, 0.4, 0.01, 5), SweepRow(0.5, 2, 1, 0.6, 0.02, 5),
                            SweepRow(1.0, 1, 1, 0.5, 0.0, 5)])
    rows = read_csv(write_csv(rep, tmp_path / "s.csv"))
    assert [(r["scale"], r["stage"], r["block"]) for r in rows] == [(0.5, 2, 1), (1.0, 1, 1), (1.0, 2, 2)]
    assert rows[0]["mean"] == pytest.approx(0.6) and rows[0]["variance"] == pytest.approx(0.02)


def test_history_csv(tmp_path):
    hist = [{"epoch": 0, "lr": 0.1, "train_loss": float("nan"), "train_top1": float("nan"), "test_top1": 0.25}]
    text = write_csv(hist, tmp_path / "m.csv").read_text().splitlines()
    assert text[0].startswith("epoch,lr,train_loss")
    assert text[1].startswith("0,0.1,nan")


# -- PPM -------------------------------------------------------------------

def test_ppm_zero_map_is_blue(tmp_path):
    heat = CamHeatmap(np.zeros((2, 2), np.float32), 0, 0.5)
    raw = ppm_bytes(heat)
    assert raw == b"P6\n2 2\n255\n" + bytes([0, 0, 255]) * 4
    assert len(raw) == len(b"P6\n2 2\n255\n") + 12
    np.testing.assert_array_equal(read_ppm(write_ppm(heat, tmp_path / "h.ppm"))[..., 2], 255)


def test_ppm_one_is_red():
    raw = ppm_bytes(CamHeatmap(np.ones((1, 3), np.float32), 0, 0.5))
    assert raw.endswith(bytes([255, 0, 0]) * 3)


def test_ppm_overlay_half_blue():
    heat = CamHeatmap(np.zeros((2, 2), np.float32), 0, 0.5)
    black = LabeledImage(np.zeros((2, 2, 3), np.float32), 0)
    raw = ppm_bytes(heat, black, alpha=0.5)
    assert raw.endswith(bytes([0, 0, 128]) * 4)
    with pytest.raises(ValueError):
        ppm_bytes(heat, LabeledImage(np.zeros((3, 3, 3), np.float32), 0))


def test_ppm_image_and_determinism(tmp_path):
    img = synth_multiscale(1, 1.0, seed=6, size=8)[0]
    a = ppm_bytes(img)
    assert a == ppm_bytes(img)
    back = read_ppm(write_ppm(img, tmp_path / "i.ppm"))
    np.testing.assert_array_equal(back, np.floor(img.pixels * 255 + 0.5).astype(np.uint8))
    with pytest.raises(TypeError):
        ppm_bytes(np.zeros((2, 2)))
