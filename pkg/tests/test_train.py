import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdanet import tensor as T
from sdanet.cli import scale_width
from sdanet.data import synth_multiscale
from sdanet.model import build, preset
from sdanet.tensor import Tensor
from sdanet.train import (BadMagic, CheckpointError, Truncated, TrainConfig, TrainingDiverged, UnsupportedVersion,
                          accuracy, evaluate, label_smoothing_ce, load_checkpoint, lr_at_epoch, predict,
                          read_checkpoint, save_checkpoint, sgd_step, topk_correct, train)


def small_spec(classes=4, width=4):
    return scale_width(preset("sda-tiny-cifar", num_classes=classes), width)


# -- loss ------------------------------------------------------------------

def test_ce_uniform_logits():
    loss = label_smoothing_ce(T.zeros((3, 10)), [0, 4, 9], eps=0.0)
    assert loss.item() == pytest.approx(math.log(10), rel=1e-6)


def test_ce_saturated_correct():
    logits = np.full((2, 5), -60.0)
    logits[0, 1] = logits[1, 3] = 60.0
    assert label_smoothing_ce(Tensor(logits), [1, 3], eps=0.0).item() < 1e-6


def test_ce_scalar_oracle():
    logits = np.array([[2.0, -1.0, 0.5], [0.1, 0.2, 3.0]])
    labels = [0, 2]
    eps, c = 0.1, 3
    total = 0.0
    for row, y in zip(logits, labels):
        lse = math.log(sum(math.exp(v) for v in row))
        for k, v in enumerate(row):
            q = 1 - eps if k == y else eps / (c - 1)
            total -= q * (v - lse)
    expect = total / 2
    assert label_smoothing_ce(Tensor(logits), labels, eps).item() == pytest.approx(expect, rel=1e-6)


def test_ce_ten_class_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((3, 10))
    labels = [2, 7, 0]
    q = np.full((3, 10), 0.1 / 9)
    q[np.arange(3), labels] = 0.9
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expect = -(q * logp).sum() / 3
    assert label_smoothing_ce(Tensor(logits), labels, 0.1).item() == pytest.approx(expect, rel=1e-5)


def test_ce_gradient_closed_form():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    labels = [0, 1, 2, 3]
    T.backward(label_smoothing_ce(x, labels, 0.1))
    q = np.full((4, 5), 0.1 / 4)
    q[np.arange(4), labels] = 0.9
    p = np.exp(x.data) / np.exp(x.data).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(x.grad, (p - q) / 4, atol=1e-6)


def test_ce_rejects_bad_labels():
    with pytest.raises(ValueError):
        label_smoothing_ce(T.zeros((2, 3)), [0, 3])


# -- optimizer -------------------------------------------------------------

def _decay_param(value):
    p = Tensor(np.array([value], dtype=np.float32), requires_grad=True, name="decay")
    return p


def test_sgd_weight_decay_only():
    p = _decay_param(1.0)
    v = [np.zeros(1, np.float32)]
    sgd_step([p], [np.zeros(1, np.float32)], v, TrainConfig(weight_decay=1e-4), 0.1)
    assert p.data[0] == pytest.approx(0.99999, rel=1e-7)


def test_sgd_plain():
    p = _decay_param(2.0)
    sgd_step([p], [np.array([0.5], np.float32)], [np.zeros(1, np.float32)],
             TrainConfig(weight_decay=0.0, momentum=0.0), 0.1)
    assert p.data[0] == pytest.approx(2.0 - 0.05)


def test_sgd_momentum_hand_recursion():
    p = _decay_param(1.0)
    v = [np.zeros(1, np.float32)]
    cfg = TrainConfig(weight_decay=0.0, momentum=0.9)
    g = np.array([0.2], np.float32)
    sgd_step([p], [g], v, cfg, 0.1)   # v1 = 0.2, p1 = 1 - 0.02 = 0.98
    sgd_step([p], [g], v, cfg, 0.1)   # v2 = 0.9*0.2 + 0.2 = 0.38, p2 = 0.98 - 0.038 = 0.942
    assert v[0][0] == pytest.approx(0.38, rel=1e-6)
    assert p.data[0] == pytest.approx(0.942, rel=1e-6)


def test_sgd_no_decay_on_bn_and_bias():
    model = build(small_spec())
    names = {n for n, p in model.named_parameters() if p.name == "no_decay"}
    assert any(n.endswith("gamma") for n in names) and any(n.endswith("bias") for n in names)
    assert not any(n.endswith("conv1.weight") for n in names)


def test_lr_schedule():
    cfg = TrainConfig(lr0=0.1, step_size=30)
    assert lr_at_epoch(cfg, 0) == 0.1
    assert lr_at_epoch(cfg, 29) == 0.1
    assert lr_at_epoch(cfg, 30) == pytest.approx(0.01)
    assert lr_at_epoch(cfg, 65) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        lr_at_epoch(cfg, -1)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr0=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0).validate()


# -- metrics ---------------------------------------------------------------

def test_perfect_and_constant_predictors():
    labels = np.repeat(np.arange(10), 5)
    perfect = np.eye(10)[labels]
    assert accuracy(perfect, labels) == {"top1": 1.0, "top5": 1.0}
    constant = np.tile(np.linspace(1, 0, 10), (50, 1))
    acc = accuracy(constant, labels)
    assert acc["top1"] == pytest.approx(0.1) and acc["top5"] == pytest.approx(0.5)


def test_topk_tie_break_lower_index():
    logits = np.zeros((2, 4))
    assert topk_correct(logits, np.array([0, 1]), 1).tolist() == [True, False]


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 12), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_top5_at_least_top1(classes, n, seed):
    rng = np.random.default_rng(seed)
    logits = np.round(rng.standard_normal((n, classes)), 1)
    labels = rng.integers(0, classes, n)
    acc = accuracy(logits, labels)
    assert 0 <= acc["top1"] <= acc["top5"] <= 1


# -- training --------------------------------------------------------------

def test_zero_epochs_returns_initial_eval():
    data = synth_multiscale(8, 1.0, seed=0, size=16)
    res = train(build(small_spec()), data, data, TrainConfig(epochs=0, batch_size=4))
    assert len(res.history) == 1
    row = res.history[0]
    assert row["epoch"] == 0 and math.isnan(row["train_loss"])
    assert res.checkpoint[:4] == b"SDAC"


def test_memorizes_small_set():
    data = synth_multiscale(64, (0.8, 1.6), seed=3, size=16)
    model = build(small_spec(width=8), seed=0)
    cfg = TrainConfig(lr0=0.02, epochs=50, step_size=40, batch_size=16, augment=False, weight_decay=0.0,
                      label_smoothing=0.0)
    res = train(model, data, None, cfg)           # 4 steps/epoch -> 200 steps
    assert max(r["train_top1"] for r in res.history) == 1.0
    assert evaluate(model, data)["top1"] == 1.0


def test_same_seed_same_history():
    data = synth_multiscale(16, (0.5, 1.5), seed=4, size=16)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=7)
    a = train(build(small_spec(), seed=1), data, data, cfg)
    b = train(build(small_spec(), seed=1), data, data, cfg)
    assert a.history == b.history or all(
        all((x == y) or (math.isnan(x) and math.isnan(y)) for x, y in zip(r.values(), s.values()))
        for r, s in zip(a.history, b.history))
    assert a.checkpoint == b.checkpoint


def test_divergence_guard():
    data = synth_multiscale(8, 1.0, seed=5, size=16)
    model = build(small_spec(), seed=0)
    model.fc.weight.data[...] = np.inf
    with pytest.raises(TrainingDiverged, match="non-finite loss"):
        train(model, data, None, TrainConfig(epochs=1, batch_size=8))


def test_class_count_mismatch():
    data = synth_multiscale(8, 1.0, seed=5, size=16)
    with pytest.raises(ValueError):
        train(build(small_spec(classes=10)), data, None, TrainConfig(epochs=1))


# -- checkpoints -----------------------------------------------------------

def _trained_model():
    data = synth_multiscale(16, (0.5, 1.5), seed=6, size=16)
    model = build(small_spec(), seed=2)
    train(model, data, None, TrainConfig(epochs=1, batch_size=8))
    return model, data


def test_checkpoint_round_trip_bit_equal():
    model, data = _trained_model()
    blob = save_checkpoint(model, {"note": "x"})
    loaded, header = load_checkpoint(blob)
    assert header["note"] == "x"
    for (n1, p), (n2, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and p.data.tobytes() == q.data.tobytes()
    for (n1, a), (n2, b) in zip(model.named_buffers(), loaded.named_buffers()):
        assert n1 == n2 and np.asarray(a, np.float32).tobytes() == b.astype(np.float32).tobytes()
    assert predict(model, data).tobytes() == predict(loaded, data).tobytes()


def test_checkpoint_layout():
    model = build(small_spec())
    blob = save_checkpoint(model)
    assert blob[:4] == b"SDAC"
    version, hlen = struct.unpack("<IQ", blob[4:16])
    header, tensors = read_checkpoint(blob)
    assert version == 1
    assert len(blob) == 16 + hlen + header["payload_bytes"]
    assert header["payload_bytes"] == 4 * sum(a.size for a in tensors.values())


def test_checkpoint_errors():
    blob = save_checkpoint(build(small_spec()))
    with pytest.raises(BadMagic, match="bad magic"):
        load_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(Truncated, match="truncated"):
        load_checkpoint(blob[:-7])
    with pytest.raises(Truncated):
        load_checkpoint(blob[:10])
    with pytest.raises(UnsupportedVersion):
        load_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])
    assert issubclass(BadMagic, CheckpointError)
