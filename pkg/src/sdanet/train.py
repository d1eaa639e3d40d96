"""Loss, SGD, step schedule, training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import ImageSet, random_crop_flip
from .layers import decays
from .model import ArchitectureSpec, Model
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"SDAC"
VERSION = 1

# root-seed consumers
SEED_INIT, SEED_AUGMENT, SEED_ORDER = 0, 1, 2


def child_rng(seed: int, consumer: int) -> np.random.Generator:
    return np.random.default_rng([seed, consumer])


@dataclass
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    step_size: int = 15
    decay: float = 0.1
    batch_size: int = 128
    label_smoothing: float = 0.1
    seed: int = 0
    augment: bool = True

    def validate(self):
        for name in ("lr0", "step_size", "decay", "batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("momentum, weight_decay and epochs must be non-negative")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")


def label_smoothing_ce(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Mean cross-entropy against ``1 - eps`` on the true class and ``eps / (C - 1)`` elsewhere."""
    n, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= classes:
        raise ValueError("labels must be valid class indices, one per row")
    if classes == 1:
        target = np.ones((n, 1))
    else:
        target = np.full((n, classes), eps / (classes - 1))
        target[np.arange(n), labels] = 1.0 - eps
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.reduce_sum(T.mul(logp, Tensor(target))), -1.0 / n)


def sgd_step(params, grads, velocity, cfg: TrainConfig, lr: float):
    """Momentum SGD with L2-coupled weight decay on conv/linear weights.

    ``g = grad + wd * p; v = momentum * v + g; p -= lr * v`` in place.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must align")
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch for parameter of shape {p.shape}")
        if cfg.weight_decay and decays(p):
            g = g + p.data * p.data.dtype.type(cfg.weight_decay)
        v *= v.dtype.type(cfg.momentum)
        v += g
        p.data -= p.data.dtype.type(lr) * v
    return params, velocity


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.step_size)


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for i in range(0, n, batch_size):
        yield idx[i : i + batch_size]


def predict(model: Model, data: ImageSet, batch_size: int = 256) -> np.ndarray:
    was = model.training
    model.eval()
    out = []
    with T.no_grad():
        for b in _batches(len(data), batch_size):
            out.append(model(Tensor(data.normalize(data.images[b]))).data)
    model.train(was)
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes), np.float32)


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether each label ranks within the top ``k``; ties favour the lower class index."""
    true = logits[np.arange(len(labels)), labels][:, None]
    cls = np.arange(logits.shape[1])[None, :]
    ahead = (logits > true) | ((logits == true) & (cls < labels[:, None]))
    return ahead.sum(axis=1) < k


def accuracy(logits: np.ndarray, labels: np.ndarray) -> dict:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return {"top1": 0.0}
    res = {"top1": float(topk_correct(logits, labels, 1).mean())}
    if logits.shape[1] >= 5:
        res["top5"] = float(topk_correct(logits, labels, 5).mean())
    return res


def evaluate(model: Model, data: ImageSet, batch_size: int = 256) -> dict:
    """Top-1 (and top-5 for >= 5 classes) accuracy as fractions in [0, 1]."""
    return accuracy(predict(model, data, batch_size), data.labels)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    checkpoint: bytes = b""


def train(model: Model, train_data: ImageSet, test_data: ImageSet | None, cfg: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Run the SGD recipe; returns per-epoch metrics and a final checkpoint.

    Row 0 of the history is the evaluation before any update.
    """
    cfg.validate()
    if train_data.num_classes != model.spec.num_classes:
        raise ValueError(f"data has {train_data.num_classes} classes, model has {model.spec.num_classes}")
    aug_rng = child_rng(cfg.seed, SEED_AUGMENT)
    order_rng = child_rng(cfg.seed, SEED_ORDER)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    result = TrainResult()

    def record(epoch, lr, loss, train_top1):
        row = {"epoch": epoch, "lr": lr, "train_loss": loss, "train_top1": train_top1}
        if test_data is not None:
            acc = evaluate(model, test_data)
            row["test_top1"] = acc["top1"]
            if "top5" in acc:
                row["test_top5"] = acc["top5"]
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        return row

    record(0, lr_at_epoch(cfg, 0), float("nan"), evaluate(model, train_data)["top1"])
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        model.train()
        order = order_rng.permutation(len(train_data))
        loss_sum, correct, seen = 0.0, 0, 0
        for b in _batches(len(train_data), cfg.batch_size, order):
            imgs = train_data.images[b]
            if cfg.augment:
                imgs = random_crop_flip(imgs, aug_rng)
            x = Tensor(train_data.normalize(imgs))
            labels = train_data.labels[b]
            logits = model(x)
            loss = label_smoothing_ce(logits, labels, cfg.label_smoothing)
            if not np.isfinite(loss.data).all():
                stats = {"logit_min": float(np.nanmin(logits.data)), "logit_max": float(np.nanmax(logits.data)),
                         "input_mean": float(x.data.mean()), "labels": np.bincount(labels).tolist()}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}: {stats}")
            model.zero_grad()
            T.backward(loss)
            sgd_step(params, [p.grad for p in params], velocity, cfg, lr)
            loss_sum += loss.item() * len(b)
            correct += int(topk_correct(logits.data, labels, 1).sum())
            seen += len(b)
        row = record(epoch + 1, lr, loss_sum / seen, correct / seen)
        log.info("epoch %d lr %.4g loss %.4f train %.3f test %s", epoch + 1, lr, row["train_loss"],
                 row["train_top1"], row.get("test_top1"))
    meta = {"epoch": cfg.epochs, "metrics": result.history[-1], "config": asdict(cfg)}
    result.checkpoint = save_checkpoint(model, meta)
    return result


# -- checkpoints -----------------------------------------------------------

class CheckpointError(ValueError):
    code = "invalid"


class BadMagic(CheckpointError):
    code = "bad_magic"


class UnsupportedVersion(CheckpointError):
    code = "unsupported_version"


class Truncated(CheckpointError):
    code = "truncated"


def _state(model: Model) -> list[tuple[str, np.ndarray]]:
    items = [(name, p.data) for name, p in model.named_parameters()]
    items += [(name, buf) for name, buf in model.named_buffers()]
    return items


def save_checkpoint(model: Model, meta: dict | None = None) -> bytes:
    """``SDAC`` | u32 version | u64 header length | JSON header | little-endian f32 payload."""
    directory, chunks, offset = [], [], 0
    for name, arr in _state(model):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = dict(meta or {})
    header.update(arch=model.spec.to_dict(), tensors=directory, payload_bytes=offset)
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def read_checkpoint(blob: bytes) -> tuple[dict, dict]:
    """Parse a checkpoint into its header and a name -> array mapping."""
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic("bad magic")
    if len(blob) < 16:
        raise Truncated("truncated header")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported checkpoint version {version}")
    if len(blob) < 16 + hlen:
        raise Truncated("truncated header")
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    payload = blob[16 + hlen :]
    if len(payload) < header["payload_bytes"]:
        raise Truncated(f"truncated payload: {len(payload)} of {header['payload_bytes']} bytes")
    tensors = {}
    end = 0
    for ent in sorted(header["tensors"], key=lambda e: e["offset"]):
        if ent["offset"] < end:
            raise CheckpointError(f"overlapping tensor {ent['name']}")
        n = math.prod(ent["shape"]) * 4
        end = ent["offset"] + n
        if end > len(payload):
            raise Truncated(f"truncated payload in {ent['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=ent["offset"])
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(np.float32)
    return header, tensors


def load_checkpoint(blob: bytes) -> tuple[Model, dict]:
    header, tensors = read_checkpoint(blob)
    model = Model(ArchitectureSpec.from_dict(header["arch"]))
    for name, p in model.named_parameters():
        if name not in tensors or tensors[name].shape != p.shape:
            raise CheckpointError(f"missing or misshaped tensor {name}")
        p.data = tensors[name].copy()
    for name, buf in model.named_buffers():
        if name not in tensors:
            raise CheckpointError(f"missing buffer {name}")
        buf[...] = tensors[name]
    return model, header


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "train_top1", "test_top1", "test_top5")
