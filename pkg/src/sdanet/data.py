"""CIFAR-10 binary reader, synthetic multi-scale shapes, augmentation and rescaling."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
SYNTH_MEAN = (0.5, 0.5, 0.5)
SYNTH_STD = (0.25, 0.25, 0.25)
RECORD_BYTES = 3073
SYNTH_CLASSES = ("disk", "square", "triangle", "ring")
DEFAULT_FACTORS = (0.14, 0.25, 0.4, 0.55, 0.7, 0.85, 1.0, 1.15, 1.3, 1.45, 1.6, 1.75, 1.9, 2.0)


class FormatError(ValueError):
    pass


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (h, w, 3) in [0, 1]
    label: int


@dataclass
class ImageSet:
    """Array-backed sequence of labeled images sharing a normalization."""

    images: np.ndarray  # (n, h, w, 3) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    mean: tuple = SYNTH_MEAN
    std: tuple = SYNTH_STD

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside class range")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        return normalize(images, self.mean, self.std)

    @classmethod
    def from_items(cls, items, num_classes: int, **kw) -> "ImageSet":
        items = list(items)
        return cls(np.stack([it.pixels for it in items]), np.array([it.label for it in items]), num_classes, **kw)


def normalize(images: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    return ((images - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


def denormalize(images: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    return (images * np.asarray(std, np.float32) + np.asarray(mean, np.float32)).astype(np.float32)


# -- CIFAR-10 --------------------------------------------------------------

def decode_cifar10(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records into uint8 HWC images and labels."""
    if len(raw) % RECORD_BYTES:
        raise FormatError(f"file length {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"label byte {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def cifar10_files(path, split: str) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if (path / "cifar-10-batches-bin").is_dir():
        path = path / "cifar-10-batches-bin"
    if split == "train":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        names = ["test_batch.bin"]
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    files = [path / n for n in names]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {missing}")
    return files


def load_cifar10(path, split: str = "train") -> ImageSet:
    """Read CIFAR-10 binary batches; pixels come back in [0, 1].

    ``path`` is a directory holding the ``*.bin`` batches (or its parent), or a
    single batch file. Per-channel normalization is applied at batch assembly
    via the returned set's ``mean``/``std``.
    """
    images, labels = [], []
    for f in cifar10_files(path, split):
        im, lb = decode_cifar10(f.read_bytes())
        images.append(im)
        labels.append(lb)
    images = np.concatenate(images).astype(np.float32) / 255.0
    return ImageSet(images, np.concatenate(labels), 10, CIFAR_MEAN, CIFAR_STD)


def default_data_dir() -> str | None:
    return os.environ.get("SDA_DATA_DIR")


# -- synthetic shapes ------------------------------------------------------

def _coverage(shape_id: int, size: int, cy: float, cx: float, radius: float, ss: int = 4) -> np.ndarray:
    """Fractional pixel coverage of one shape, by ``ss x ss`` supersampling."""
    offs = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    xs = ys
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    if shape_id == 0:
        inside = dy * dy + dx * dx <= radius * radius
    elif shape_id == 1:
        half = 0.8 * radius
        inside = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    elif shape_id == 2:
        # upward equilateral triangle inscribed in the circle
        top = -radius
        base = radius / 2
        in_band = (dy >= top) & (dy <= base)
        half_w = (dy - top) / (base - top) * radius * np.sqrt(3) / 2
        inside = in_band & (np.abs(dx) <= half_w)
    else:
        r2 = dy * dy + dx * dx
        inside = (r2 <= radius * radius) & (r2 >= (0.55 * radius) ** 2)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def synth_multiscale(count: int, scale, seed: int, size: int = 32, base_diameter: float = 12.0,
                     return_masks: bool = False):
    """Shapes (disk/square/triangle/ring) over noise backgrounds.

    ``scale`` is a float in [0.1, 2.5], or a ``(lo, hi)`` pair to draw each
    sample's scale uniformly. Object diameter is ``scale * base_diameter``.
    Classes are balanced to within one sample.
    """
    lo, hi = (scale, scale) if np.isscalar(scale) else scale
    if not (0.1 <= lo <= hi <= 2.5):
        raise ValueError(f"scale must lie in [0.1, 2.5], got {scale}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % len(SYNTH_CLASSES))
    images = np.empty((count, size, size, 3), dtype=np.float32)
    masks = np.empty((count, size, size), dtype=np.float32)
    for i, lab in enumerate(labels):
        s = lo if lo == hi else rng.uniform(lo, hi)
        radius = s * base_diameter / 2
        slack = max(size / 2 - radius, 0.0)
        cy = size / 2 + rng.uniform(-slack, slack) * 0.5
        cx = size / 2 + rng.uniform(-slack, slack) * 0.5
        bg = rng.uniform(0.0, 0.35, (size, size, 3)) + rng.uniform(0.0, 0.2, 3)
        color = rng.uniform(0.55, 1.0, 3)
        cov = _coverage(int(lab), size, cy, cx, radius)
        img = bg * (1 - cov[..., None]) + color * cov[..., None]
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i] = cov
    out = ImageSet(images, labels, len(SYNTH_CLASSES), SYNTH_MEAN, SYNTH_STD)
    return (out, masks) if return_masks else out


# -- transforms ------------------------------------------------------------

def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1]


def random_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Reflect-pad, random crop back to size, 50% horizontal flip (batched)."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
        out[i] = crop[:, ::-1] if flip[i] else crop
    return out


def augment(img: LabeledImage, policy: str, seed: int) -> LabeledImage:
    if policy == "eval":
        return img
    if policy != "train":
        raise ValueError(f"unknown policy {policy!r}")
    rng = np.random.default_rng(seed)
    out = random_crop_flip(img.pixels[None], rng)[0]
    return LabeledImage(out, img.label)


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize with edge clamping."""
    h, w = pixels.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(np.float32)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy = fy[:, None, None] if pixels.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if pixels.ndim == 3 else fx[None, :]
    top = pixels[y0][:, x0] * (1 - fx) + pixels[y0][:, x1] * fx
    bot = pixels[y1][:, x0] * (1 - fx) + pixels[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def center_crop(pixels: np.ndarray, crop: int) -> np.ndarray:
    """Center crop to ``crop x crop``, edge-replicating when the image is smaller."""
    h, w = pixels.shape[:2]
    pad_h, pad_w = max(crop - h, 0), max(crop - w, 0)
    if pad_h or pad_w:
        widths = [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)] + [(0, 0)] * (pixels.ndim - 2)
        pixels = np.pad(pixels, widths, mode="edge")
        h, w = pixels.shape[:2]
    top, left = (h - crop) // 2, (w - crop) // 2
    return pixels[top : top + crop, left : left + crop]


def rescale_center_crop(img: LabeledImage, factor: float, crop: int) -> LabeledImage:
    if not factor > 0:
        raise ValueError(f"factor must be positive, got {factor}")
    h, w = img.pixels.shape[:2]
    oh, ow = max(int(round(h * factor)), 1), max(int(round(w * factor)), 1)
    resized = img.pixels if (oh, ow) == (h, w) else bilinear_resize(img.pixels, oh, ow)
    return LabeledImage(np.ascontiguousarray(center_crop(resized, crop)), img.label)


@dataclass
class ScaleSweepSet:
    images: ImageSet
    factors: tuple = DEFAULT_FACTORS
    crop: int = 32

    def __post_init__(self):
        f = np.asarray(self.factors, dtype=float)
        if f.size == 0 or np.any(f <= 0) or np.any(np.diff(f) <= 0):
            raise ValueError("scale factors must be positive and strictly increasing")
        self.factors = tuple(float(x) for x in f)

    def at(self, factor: float) -> ImageSet:
        items = [rescale_center_crop(img, factor, self.crop) for img in self.images]
        return ImageSet.from_items(items, self.images.num_classes, mean=self.images.mean, std=self.images.std)


def sweep_factors(lo: float, hi: float) -> tuple:
    """Default factors restricted to ``[lo, hi]`` (endpoints always included)."""
    inner = [f for f in DEFAULT_FACTORS if lo < f < hi]
    return tuple([lo] + inner + [hi]) if hi > lo else (lo,)
