"""Attention-vs-scale sweeps, Grad-CAM heatmaps, CSV and PPM output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import tensor as T
from .data import ImageSet, LabeledImage, ScaleSweepSet, bilinear_resize
from .model import Model
from .tensor import Tensor

DEFAULT_STAGE = 2
SWEEP_FIELDS = ("scale", "stage", "block", "mean", "variance", "n")


@dataclass(frozen=True)
class SweepRow:
    scale: float
    stage: int  # 1-based
    block: int  # 1-based
    mean: float
    variance: float
    n: int


@dataclass
class ScaleSweepReport:
    rows: list = field(default_factory=list)

    def sorted(self) -> "ScaleSweepReport":
        return ScaleSweepReport(sorted(self.rows, key=lambda r: (r.scale, r.stage, r.block)))

    def stages(self) -> list[int]:
        return sorted({r.stage for r in self.rows})

    def series(self, stage: int, block: int) -> tuple[np.ndarray, np.ndarray]:
        rows = sorted((r for r in self.rows if r.stage == stage and r.block == block), key=lambda r: r.scale)
        return np.array([r.scale for r in rows]), np.array([r.mean for r in rows])

    def blocks(self, stage: int) -> list[int]:
        return sorted({r.block for r in self.rows if r.stage == stage})

    def trend(self, stage: int = DEFAULT_STAGE) -> dict[int, float]:
        """Spearman correlation of each block's mean attention with the scale factor."""
        out = {}
        for b in self.blocks(stage):
            scales, means = self.series(stage, b)
            if len(scales) < 2 or np.ptp(means) == 0:
                out[b] = 0.0
            else:
                out[b] = float(spearmanr(scales, means).statistic)
        return out


def sda_stages(model: Model) -> list[int]:
    return [i + 1 for i, s in enumerate(model.stages) if s.sda is not None]


def collect_attention(model: Model, data: ImageSet, batch_size: int = 128) -> dict[int, np.ndarray]:
    """Attention weights ``(n, m, c)`` per 1-based SDA stage, inference mode."""
    was = model.training
    model.eval()
    model.capture = True
    out: dict[int, list] = {}
    try:
        with T.no_grad():
            for i in range(0, len(data), batch_size):
                model(Tensor(data.normalize(data.images[i : i + batch_size])))
                for si, rec in enumerate(model.trace):
                    if rec["attention"] is not None:
                        out.setdefault(si + 1, []).append(rec["attention"].values.copy())
    finally:
        model.capture = False
        model.trace = []
        model.train(was)
    return {k: np.concatenate(v) for k, v in out.items()}


def attention_sweep(model: Model, sweep: ScaleSweepSet, batch_size: int = 128) -> ScaleSweepReport:
    """Mean and variance of each block's attention over samples and channels, per factor."""
    if not sda_stages(model):
        raise ValueError("model has no adaptive SDA stage")
    report = ScaleSweepReport()
    for factor in sweep.factors:
        weights = collect_attention(model, sweep.at(factor), batch_size)
        for stage, s in weights.items():
            for b in range(s.shape[1]):
                w = s[:, b, :].astype(np.float64)
                report.rows.append(SweepRow(factor, stage, b + 1, float(w.mean()), float(w.var()), int(s.shape[0])))
    return report.sorted()


# -- Grad-CAM --------------------------------------------------------------

@dataclass
class CamHeatmap:
    values: np.ndarray  # (h, w) in [0, 1]
    class_index: int
    score: float


def cam_from_gradients(activations: np.ndarray, gradients: np.ndarray, out_size=None) -> np.ndarray:
    """``relu(sum_k mean(dY/dA_k) * A_k)``, optionally upsampled, scaled to max 1.

    ``activations`` and ``gradients`` are ``(h, w, c)``.
    """
    a = activations.astype(np.float64)
    weights = gradients.astype(np.float64).mean(axis=(0, 1))
    raw = np.maximum((a * weights).sum(axis=-1), 0.0)
    if out_size is not None and tuple(out_size) != raw.shape:
        raw = np.maximum(bilinear_resize(raw.astype(np.float32), *out_size).astype(np.float64), 0.0)
    peak = raw.max()
    return (raw / peak if peak > 0 else raw).astype(np.float32)


def grad_cam(model: Model, img: LabeledImage, class_index: int, stage: int, data: ImageSet | None = None) -> CamHeatmap:
    """Grad-CAM of ``class_index`` at the output of 1-based ``stage``.

    ``data`` supplies the normalization constants (synthetic defaults otherwise).
    """
    if not 0 <= class_index < model.spec.num_classes:
        raise ValueError(f"class index {class_index} outside [0, {model.spec.num_classes})")
    if not 1 <= stage <= len(model.stages):
        raise ValueError(f"stage {stage} outside [1, {len(model.stages)}]")
    norm = data.normalize if data is not None else ImageSet(img.pixels[None], [0], model.spec.num_classes).normalize
    was = model.training
    model.eval()
    model.capture = True
    try:
        x = Tensor(norm(img.pixels[None]))
        logits = model(x)
        target = T.flat_index(logits, (0, class_index))
        stage_out = model.trace[stage - 1]["output"]
        T.backward(target)
        acts = stage_out.data[0]
        grads = np.zeros_like(acts) if stage_out.grad is None else stage_out.grad[0]
        probs = np.exp(logits.data[0] - logits.data[0].max())
        probs /= probs.sum()
        values = cam_from_gradients(acts, grads, img.pixels.shape[:2])
        return CamHeatmap(values, class_index, float(probs[class_index]))
    finally:
        model.capture = False
        model.trace = []
        model.zero_grad()
        model.train(was)


# -- output ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def write_csv(obj, path) -> Path:
    """Write a ``ScaleSweepReport`` or a metric history (list of dicts)."""
    path = Path(path)
    if isinstance(obj, ScaleSweepReport):
        header = list(SWEEP_FIELDS)
        rows = [[getattr(r, f) for f in header] for r in obj.sorted().rows]
    else:
        from .train import HISTORY_FIELDS

        present = set().union(*(r.keys() for r in obj)) if obj else set()
        header = [f for f in HISTORY_FIELDS if f in present or f in HISTORY_FIELDS[:5]]
        rows = [[r.get(f, float("nan")) for f in header] for r in obj]
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def ramp(values: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) colour ramp, float RGB in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    return np.concatenate([v, np.zeros_like(v), 1.0 - v], axis=-1)


def _to_bytes(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)


def ppm_bytes(obj, overlay: LabeledImage | None = None, alpha: float = 0.5) -> bytes:
    if isinstance(obj, CamHeatmap):
        rgb = ramp(obj.values.astype(np.float64))
        if overlay is not None:
            if overlay.pixels.shape[:2] != rgb.shape[:2]:
                raise ValueError("overlay image size differs from heatmap")
            rgb = alpha * rgb + (1 - alpha) * overlay.pixels.astype(np.float64)
    elif isinstance(obj, LabeledImage):
        rgb = obj.pixels.astype(np.float64)
    else:
        raise TypeError(f"cannot render {type(obj).__name__}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + _to_bytes(rgb).tobytes()


def write_ppm(obj, path, overlay: LabeledImage | None = None) -> Path:
    path = Path(path)
    path.write_bytes(ppm_bytes(obj, overlay))
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
