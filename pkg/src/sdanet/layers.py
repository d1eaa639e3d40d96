"""Neural network layers on top of :mod:`sdanet.tensor`.

Feature maps are NHWC. Convolution weights are stored as
``(k, k, c_in // groups, c_out)`` and applied as cross-correlation.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor, _result


# -- functional ops --------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin_g, cout = weight.shape
    n, h, w, cin = x.shape
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide c_in={cin} and c_out={cout}")
    if cin // groups != cin_g:
        raise ValueError(f"input has {cin} channels, layer expects {cin_g * groups}")
    oh, ow = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"input {h}x{w} too small for kernel {kh} with padding {padding}")
    if n == 0:
        raise ValueError("empty batch")
    cout_g = cout // groups
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    wd = weight.data
    pointwise = kh == 1 and kw == 1

    if pointwise:
        xs = xd[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride, :]
        cols = np.ascontiguousarray(xs).reshape(n * oh * ow, cin)
        K = cin_g
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c), grouped by channel block below
        win = win[:, :oh, :ow]
        K = kh * kw * cin_g
        if groups == 1:
            cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, K)
        else:
            win = win.reshape(n, oh, ow, groups, cin_g, kh, kw)
            cols = np.ascontiguousarray(win.transpose(3, 0, 1, 2, 5, 6, 4)).reshape(groups, n * oh * ow, K)

    if groups == 1:
        wmat = wd.reshape(K, cout)
        out = cols @ wmat
    else:
        if pointwise:
            cols = np.ascontiguousarray(cols.reshape(-1, groups, cin_g).transpose(1, 0, 2))
        wmat = wd.reshape(K, groups, cout_g).transpose(1, 0, 2)
        out = np.matmul(cols, wmat).transpose(1, 0, 2).reshape(-1, cout)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, cout)
    padded_shape = xd.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if groups == 1:
            if weight.requires_grad:
                gw = (cols.T @ g2).reshape(wd.shape)
            if x.requires_grad:
                gcols = g2 @ wmat.T
        else:
            gg = np.ascontiguousarray(g2.reshape(-1, groups, cout_g).transpose(1, 0, 2))
            if weight.requires_grad:
                gw = np.matmul(cols.transpose(0, 2, 1), gg).transpose(1, 0, 2).reshape(wd.shape)
            if x.requires_grad:
                gcols = np.matmul(gg, wmat.transpose(0, 2, 1))
        if x.requires_grad:
            gpad = np.zeros(padded_shape, dtype=T.DTYPE)
            if pointwise:
                if groups != 1:
                    gcols = gcols.transpose(1, 0, 2)
                gpad[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride, :] = gcols.reshape(n, oh, ow, cin)
            else:
                if groups == 1:
                    gc = gcols.reshape(n, oh, ow, kh, kw, cin)
                else:
                    gc = gcols.reshape(groups, n, oh, ow, kh, kw, cin_g).transpose(1, 2, 3, 4, 5, 0, 6)
                    gc = gc.reshape(n, oh, ow, kh, kw, cin)
                for i in range(kh):
                    for j in range(kw):
                        gpad[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :] += gc[:, :, :, i, j, :]
            gx = gpad[:, padding : padding + h, padding : padding + w, :] if padding else gpad
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(T.DTYPE)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result(out.astype(T.DTYPE, copy=False), inputs, bw, "conv2d")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel (last axis) batch normalization.

    In training mode batch statistics are used and the running buffers are
    updated in place; a reduction extent of one falls back to running stats.
    """
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise ValueError(f"channel mismatch: input has {c}, layer has {gamma.shape[0]}")
    axes = tuple(range(x.ndim - 1))
    count = x.size // c if c else 0
    if training and count == 0:
        raise ValueError("batchnorm on an empty batch")
    dt = T.DTYPE
    xd = x.data
    use_batch = training and count > 1
    if use_batch:
        mean = xd.mean(axis=axes, dtype=np.float64)
        xc = xd - mean.astype(dt)
        var = np.einsum("ic,ic->c", xc.reshape(-1, c), xc.reshape(-1, c), dtype=np.float64) / count
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        xc = xd - mean.astype(dt)
    inv_std = 1.0 / np.sqrt(var + eps)
    gd = gamma.data.astype(np.float64)
    out = xc * (gd * inv_std).astype(dt) + beta.data.astype(dt)

    def bw(g):
        gbeta = g.sum(axis=axes, dtype=np.float64)
        ggamma = np.einsum("ic,ic->c", g.reshape(-1, c), xc.reshape(-1, c), dtype=np.float64) * inv_std
        gx = None
        if x.requires_grad:
            k = (gd * inv_std).astype(dt)
            if use_batch:
                a = (gbeta / count).astype(dt)
                b = (ggamma * inv_std / count).astype(dt)
                gx = k * (g - a - xc * b)
            else:
                gx = g * k
        return gx, ggamma.astype(dt), gbeta.astype(dt)

    return _result(out, (x, gamma, beta), bw, "batchnorm")


def maxpool(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed max; ties route the gradient to the first element in row-major order."""
    n, h, w, c = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"pool window {k} larger than input {h}x{w}")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)), constant_values=-np.inf)
    oh, ow = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    win = sliding_window_view(xd, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    flat = win.reshape(n, oh, ow, c, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    padded_shape = xd.shape

    def bw(g):
        gpad = np.zeros(padded_shape, dtype=T.DTYPE)
        di, dj = np.divmod(arg, k)
        nn_, yy, xx, cc = np.indices((n, oh, ow, c), sparse=True)
        np.add.at(gpad, (nn_, yy * stride + di, xx * stride + dj, cc), g)
        if padding:
            gpad = gpad[:, padding : padding + h, padding : padding + w, :]
        return (gpad,)

    return _result(np.ascontiguousarray(out), (x,), bw, "maxpool")


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel; ``(..., h, w, c) -> (..., 1, 1, c)``."""
    if x.shape[-3] < 1 or x.shape[-2] < 1:
        raise ValueError("global_avg_pool needs non-empty spatial extent")
    return T.reduce_mean(x, axes=(-3, -2), keepdims=True)


def grouped_softmax(v: Tensor, m: int, c: int) -> Tensor:
    """Softmax across ``m`` blocks per channel of a block-major logit vector.

    ``v`` has ``m * c`` trailing entries (optionally batched); entry
    ``i * c + k`` is block ``i``'s logit for channel ``k``. Returns ``(..., m, c)``
    whose columns sum to one.
    """
    if v.shape[-1] != m * c:
        raise ValueError(f"expected {m * c} logits, got {v.shape[-1]}")
    return T.softmax(T.reshape(v, v.shape[:-1] + (m, c)), axis=-2)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = T.matmul(x, weight)
    return out if bias is None else T.add(out, bias)


# -- modules ---------------------------------------------------------------

class Module:
    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True):
        for mod in self.modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        """Cast parameters and buffers in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self.modules():
            for name in getattr(mod, "_buffers", ()):
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data, decay: bool) -> Tensor:
    t = Tensor(data, requires_grad=True)
    t.name = "decay" if decay else "no_decay"
    return t


def decays(p: Tensor) -> bool:
    """Whether weight decay applies (conv/linear weights only)."""
    return p.name == "decay"


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = False, rng: np.random.Generator | None = None):
        if c_in % groups or c_out % groups:
            raise ValueError(f"groups={groups} must divide {c_in} and {c_out}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = k * k * c_in // groups
        rng = rng or np.random.default_rng(0)
        w = rng.standard_normal((k, k, c_in // groups, c_out)) * math.sqrt(2.0 / fan_in)
        self.weight = _param(w, decay=True)
        self.bias = _param(np.zeros(c_out), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def out_shape(self, shape):
        h, w, _ = shape
        return (_out_extent(h, self.k, self.stride, self.padding), _out_extent(w, self.k, self.stride, self.padding), self.c_out)

    def macs(self, shape) -> int:
        oh, ow, _ = self.out_shape(shape)
        return oh * ow * self.k * self.k * (self.c_in // self.groups) * self.c_out


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.c = c
        self.momentum, self.eps = momentum, eps
        self.gamma = _param(np.ones(c), decay=False)
        self.beta = _param(np.zeros(c), decay=False)
        self.running_mean = np.zeros(c, dtype=T.DTYPE)
        self.running_var = np.ones(c, dtype=T.DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(c_in)
        self.c_in, self.c_out = c_in, c_out
        self.weight = _param(rng.uniform(-bound, bound, (c_in, c_out)), decay=True)
        self.bias = _param(np.zeros(c_out), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class SEBlock(Module):
    """Squeeze-and-excitation channel gate."""

    def __init__(self, c: int, reduction: int = 16, rng: np.random.Generator | None = None):
        self.c = c
        self.hidden = max(c // reduction, 1)
        self.fc1 = Conv2d(c, self.hidden, 1, bias=True, rng=rng)
        self.fc2 = Conv2d(self.hidden, c, 1, bias=True, rng=rng)
        self.detach_gate = False

    def gate(self, x: Tensor) -> Tensor:
        u = global_avg_pool(x)
        return T.sigmoid(self.fc2(T.relu(self.fc1(u))))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c:
            raise ValueError(f"channel mismatch: {x.shape[-1]} vs {self.c}")
        g = self.gate(x)
        if self.detach_gate:
            g = T.detach(g)
        return T.broadcast_mul(x, g)

    def macs(self, shape) -> int:
        return self.c * self.hidden * 2


def se_block(block: SEBlock, x: Tensor) -> Tensor:
    return block(x)


class Bottleneck(Module):
    """1x1 -> 3x3 (stride, groups) -> 1x1 residual block with expansion 4.

    ``forward`` returns ``(x + F(x), relu(x + F(x)))``.
    """

    expansion = 4

    def __init__(self, c_in: int, c_mid: int, stride: int = 1, groups: int = 1, se: bool = False,
                 se_reduction: int = 16, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c_out = c_mid * self.expansion
        self.c_in, self.c_mid, self.c_out, self.stride = c_in, c_mid, c_out, stride
        self.conv1 = Conv2d(c_in, c_mid, 1, rng=rng)
        self.bn1 = BatchNorm(c_mid)
        self.conv2 = Conv2d(c_mid, c_mid, 3, stride=stride, groups=groups, rng=rng)
        self.bn2 = BatchNorm(c_mid)
        self.conv3 = Conv2d(c_mid, c_out, 1, rng=rng)
        self.bn3 = BatchNorm(c_out)
        self.se = SEBlock(c_out, se_reduction, rng=rng) if se else None
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, stride=stride, rng=rng)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None

    def residual(self, x: Tensor) -> Tensor:
        y = T.relu(self.bn1(self.conv1(x)))
        y = T.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        if self.se is not None:
            y = self.se(y)
        return y

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.c_in:
            raise ValueError(f"block expects {self.c_in} input channels, got {x.shape[-1]}")
        short = x if self.proj is None else self.proj_bn(self.proj(x))
        pre = T.elementwise_add(short, self.residual(x))
        return pre, T.relu(pre)

    def conv_layers(self) -> list[Conv2d]:
        convs = [self.conv1, self.conv2, self.conv3]
        if self.proj is not None:
            convs.append(self.proj)
        return convs


def bottleneck_forward(block: Bottleneck, x: Tensor) -> tuple[Tensor, Tensor]:
    return block(x)
