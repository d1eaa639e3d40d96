"""Depth attention over the block outputs of one stage.

Given same-shape block outputs ``Z_1..Z_m`` the attention branch sums them,
pools the sum to a channel descriptor, maps it through a 1x1 bottleneck
(``W1 -> BN -> ReLU -> W2``) to ``m * c`` logits, normalizes the logits across
blocks with a per-channel softmax and returns ``relu(sum_i s_i * Z_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Conv2d, Module, global_avg_pool, grouped_softmax
from .tensor import Tensor

PRE_ACTIVATION = "pre_activation"
POST_ACTIVATION = "post_activation"


def bottleneck_width(c: int, r: int, l_threshold: int) -> int:
    """``max(floor(c / r), L)``."""
    if r < 1 or l_threshold < 1:
        raise ValueError("r and L must be positive")
    return max(c // r, l_threshold)


@dataclass
class FeatureSequence:
    blocks: list
    tap: str = PRE_ACTIVATION

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("feature sequence must hold at least one block output")
        shape = self.blocks[0].shape
        for z in self.blocks[1:]:
            if z.shape != shape:
                raise ValueError(f"block outputs differ in shape: {z.shape} vs {shape}")
        if self.tap not in (PRE_ACTIVATION, POST_ACTIVATION):
            raise ValueError(f"unknown tap {self.tap!r}")

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def shape(self) -> tuple:
        return self.blocks[0].shape

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)


@dataclass
class AttentionWeights:
    """Softmax weights ``s`` with shape ``(..., m, c)``; columns sum to one."""

    s: Tensor

    @property
    def values(self) -> np.ndarray:
        return self.s.data

    def block(self, i: int) -> Tensor:
        """Block ``i``'s channel weights shaped ``(..., 1, 1, c)`` for broadcasting."""
        w = T.take(self.s, i, axis=-2)
        return T.reshape(w, w.shape[:-2] + (1, 1, w.shape[-1]))


class SdaParams(Module):
    """Attention-branch learnables for a stage of ``m`` blocks with ``c`` channels.

    ``w2`` starts at zero so a fresh module weights every block by ``1/m``.
    """

    def __init__(self, m: int, c: int, r: int = 16, l_threshold: int = 64, rng: np.random.Generator | None = None):
        if m < 1:
            raise ValueError("m must be >= 1")
        self.m, self.c, self.r, self.l_threshold = m, c, r, l_threshold
        self.d = bottleneck_width(c, r, l_threshold)
        self.w1 = Conv2d(c, self.d, 1, rng=rng)
        self.bn = BatchNorm(self.d)
        self.w2 = Conv2d(self.d, m * c, 1, bias=True, rng=rng)
        self.w2.weight.data[...] = 0.0
        self.detach_weights = False

    def forward(self, z: FeatureSequence) -> Tensor:
        return sda_forward(self, z)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def macs(self) -> int:
        return self.c * self.d + self.d * self.m * self.c


def _as_sequence(z) -> FeatureSequence:
    return z if isinstance(z, FeatureSequence) else FeatureSequence(list(z))


def fuse_sum(z) -> Tensor:
    z = _as_sequence(z)
    return T.stack_sum(z.blocks)


def attention_logits(params: SdaParams, f: Tensor) -> Tensor:
    """``W2(relu(BN(W1 GAP(f))))`` flattened to ``(n, m * c)``."""
    if f.shape[-1] != params.c:
        raise ValueError(f"channel mismatch: fused map has {f.shape[-1]}, attention expects {params.c}")
    if f.ndim == 3:
        f = T.reshape(f, (1,) + f.shape)
    u = global_avg_pool(f)
    hidden = T.relu(params.bn(params.w1(u)))
    v = params.w2(hidden)
    return T.reshape(v, (v.shape[0], params.m * params.c))


def attention_weights(logits: Tensor, m: int, c: int) -> AttentionWeights:
    return AttentionWeights(grouped_softmax(logits, m, c))


def weighted_sum(z: FeatureSequence, weights: AttentionWeights) -> Tensor:
    """``sum_i s_i * Z_i`` before the output activation."""
    terms = [T.broadcast_mul(zi, weights.block(i)) for i, zi in enumerate(z.blocks)]
    return T.stack_sum(terms)


def sda_forward(params: SdaParams, z, return_weights: bool = False):
    z = _as_sequence(z)
    if z.m != params.m:
        raise ValueError(f"attention built for m={params.m}, got {z.m} block outputs")
    batched = z.blocks[0].ndim == 4
    if not batched:
        z = FeatureSequence([T.reshape(b, (1,) + b.shape) for b in z.blocks], z.tap)
    weights = attention_weights(attention_logits(params, fuse_sum(z)), params.m, params.c)
    if params.detach_weights:
        weights = AttentionWeights(T.detach(weights.s))
    out = T.relu(weighted_sum(z, weights))
    if not batched:
        out = T.reshape(out, out.shape[1:])
    return (out, weights) if return_weights else out


def nonadaptive_forward(z) -> Tensor:
    """``relu(mean_i Z_i)``: the parameter-free uniform fusion."""
    z = _as_sequence(z)
    return T.relu(T.scale(fuse_sum(z), 1.0 / z.m))


def uniform_weights(m: int, c: int, batch: int = 1) -> AttentionWeights:
    return AttentionWeights(Tensor(np.full((batch, m, c), 1.0 / m, dtype=T.DTYPE)))


def pinned_forward(z: Sequence[Tensor] | FeatureSequence, weights: AttentionWeights) -> Tensor:
    """Output for externally fixed attention weights."""
    return T.relu(weighted_sum(_as_sequence(z), weights))
