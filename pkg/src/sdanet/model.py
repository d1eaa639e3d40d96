"""Architecture specs, network assembly, complexity counters and receptive fields."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Bottleneck, Conv2d, Linear, Module, global_avg_pool, maxpool
from .sda import POST_ACTIVATION, PRE_ACTIVATION, FeatureSequence, SdaParams, bottleneck_width, nonadaptive_forward, sda_forward
from .tensor import Tensor

TRUNKS = ("resnet", "se")
SDA_MODES = ("adaptive", "nonadaptive", "off")


@dataclass(frozen=True)
class StageSpec:
    m: int
    c_out: int
    c_mid: int
    stride: int = 1
    groups: int = 1
    trunk: str = "resnet"
    sda: str = "off"
    r: int = 16
    l_threshold: int = 64
    tap: str = PRE_ACTIVATION
    c_in: int | None = None

    def validate(self):
        if self.m < 1:
            raise ValueError(f"stage needs at least one block, got m={self.m}")
        if self.c_out != 4 * self.c_mid:
            raise ValueError(f"c_out ({self.c_out}) must be 4 * c_mid ({self.c_mid})")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.groups < 1 or self.c_mid % self.groups:
            raise ValueError(f"groups={self.groups} must divide c_mid={self.c_mid}")
        if self.trunk not in TRUNKS:
            raise ValueError(f"unknown trunk {self.trunk!r}")
        if self.sda not in SDA_MODES:
            raise ValueError(f"unknown sda mode {self.sda!r}")
        if self.tap not in (PRE_ACTIVATION, POST_ACTIVATION):
            raise ValueError(f"unknown tap {self.tap!r}")
        if self.r < 1 or self.l_threshold < 1:
            raise ValueError("r and l_threshold must be positive")


@dataclass(frozen=True)
class StemSpec:
    kernel: int = 7
    channels: int = 64
    stride: int = 2
    maxpool: bool = True


@dataclass(frozen=True)
class ArchitectureSpec:
    stages: tuple
    stem: StemSpec = StemSpec()
    num_classes: int = 1000
    pre_classifier_bn: bool | None = None
    in_channels: int = 3
    name: str = "custom"

    @property
    def classifier_bn(self) -> bool:
        if self.pre_classifier_bn is not None:
            return self.pre_classifier_bn
        return any(s.sda != "off" for s in self.stages)

    def validate(self):
        if not self.stages:
            raise ValueError("architecture needs at least one stage")
        prev = self.stem.channels
        for i, s in enumerate(self.stages):
            s.validate()
            if s.c_in is not None and s.c_in != prev:
                raise ValueError(f"stage {i + 1} declares c_in={s.c_in} but receives {prev} channels")
            prev = s.c_out
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    def with_sda(self, mode: str) -> "ArchitectureSpec":
        """Same trunk and classifier with every stage's fusion set to ``mode``."""
        return replace(self, stages=tuple(replace(s, sda=mode) for s in self.stages),
                       pre_classifier_bn=self.classifier_bn)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchitectureSpec":
        doc = dict(doc)
        _reject_unknown(doc, cls, "architecture")
        stages = []
        for s in doc.pop("stages"):
            _reject_unknown(s, StageSpec, "stage")
            stages.append(StageSpec(**s))
        stem = doc.pop("stem", None)
        if stem is not None:
            _reject_unknown(stem, StemSpec, "stem")
            doc["stem"] = StemSpec(**stem)
        spec = cls(stages=tuple(stages), **doc)
        spec.validate()
        return spec


def _reject_unknown(doc: dict, cls, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown {what} keys: {sorted(unknown)}")


def load_spec(path) -> ArchitectureSpec:
    with open(path) as fh:
        return ArchitectureSpec.from_dict(json.load(fh))


# -- presets ---------------------------------------------------------------

def _imagenet(name, blocks, groups, sda, trunk="resnet", tap=PRE_ACTIVATION):
    mids = (64, 128, 256, 512)
    stages = tuple(
        StageSpec(m=m, c_out=4 * c, c_mid=c, stride=1 if i == 0 else 2, groups=groups, trunk=trunk,
                  sda=sda, r=16, l_threshold=64, tap=tap)
        for i, (m, c) in enumerate(zip(blocks, mids))
    )
    return ArchitectureSpec(stages=stages, stem=StemSpec(7, 64, 2, True), num_classes=1000, name=name)


def _tiny(name, sda, num_classes=10, tap=PRE_ACTIVATION):
    stages = tuple(
        StageSpec(m=3, c_out=4 * c, c_mid=c, stride=1 if i == 0 else 2, groups=1, sda=sda, r=8, l_threshold=16, tap=tap)
        for i, c in enumerate((16, 32, 64))
    )
    return ArchitectureSpec(stages=stages, stem=StemSpec(3, 16, 1, False), num_classes=num_classes, name=name)


PRESETS = {
    "resnet-50": _imagenet("resnet-50", (3, 4, 6, 3), 1, "off"),
    "resnet-86": _imagenet("resnet-86", (5, 6, 12, 5), 8, "off"),
    "sda-resnet-86": _imagenet("sda-resnet-86", (5, 6, 12, 5), 8, "adaptive"),
    "sda-resnet-86-post": _imagenet("sda-resnet-86-post", (5, 6, 12, 5), 8, "adaptive", tap=POST_ACTIVATION),
    "sda-resnet-86-nonadaptive": _imagenet("sda-resnet-86-nonadaptive", (5, 6, 12, 5), 8, "nonadaptive"),
    "sda-senet-86": _imagenet("sda-senet-86", (5, 6, 12, 5), 1, "adaptive", trunk="se"),
    "sda-tiny-cifar": _tiny("sda-tiny-cifar", "adaptive"),
    "sda-tiny-nonadaptive": _tiny("sda-tiny-nonadaptive", "nonadaptive"),
    "resnet-tiny-cifar": _tiny("resnet-tiny-cifar", "off"),
}


def preset(name: str, num_classes: int | None = None) -> ArchitectureSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if num_classes is not None:
        spec = replace(spec, num_classes=num_classes)
    return spec


# -- network ---------------------------------------------------------------

class Stage(Module):
    def __init__(self, spec: StageSpec, c_in: int, rng: np.random.Generator):
        self.spec = spec
        self.blocks = []
        for i in range(spec.m):
            self.blocks.append(Bottleneck(c_in if i == 0 else spec.c_out, spec.c_mid,
                                          stride=spec.stride if i == 0 else 1, groups=spec.groups,
                                          se=spec.trunk == "se", rng=rng))
        self.sda = SdaParams(spec.m, spec.c_out, spec.r, spec.l_threshold, rng=rng) if spec.sda == "adaptive" else None

    def forward(self, x: Tensor, record: dict | None = None) -> Tensor:
        taps = []
        pres = []
        for block in self.blocks:
            pre, x = block(x)
            pres.append(pre)
            taps.append(pre if self.spec.tap == PRE_ACTIVATION else x)
        weights = None
        if self.spec.sda == "off":
            out = x
        else:
            z = FeatureSequence(taps, self.spec.tap)
            if self.sda is not None:
                out, weights = sda_forward(self.sda, z, return_weights=True)
            else:
                out = nonadaptive_forward(z)
        if record is not None:
            record.update(pre=pres, taps=taps, attention=weights, output=out)
        return out


class Model(Module):
    """Stem -> stages -> GAP -> (BN) -> linear classifier.

    With ``capture`` set, ``forward`` records per-stage block outputs,
    attention weights and stage outputs in ``self.trace``; stage outputs keep
    their gradients for Grad-CAM.
    """

    def __init__(self, spec: ArchitectureSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        st = spec.stem
        self.stem_conv = Conv2d(spec.in_channels, st.channels, st.kernel, stride=st.stride, rng=rng)
        self.stem_bn = BatchNorm(st.channels)
        c = st.channels
        self.stages = []
        for s in spec.stages:
            self.stages.append(Stage(s, c, rng))
            c = s.c_out
        self.head_bn = BatchNorm(c) if spec.classifier_bn else None
        self.fc = Linear(c, spec.num_classes, rng=rng)
        self.capture = False
        self.trace: list[dict] = []

    @property
    def blocks(self) -> list[Bottleneck]:
        return [b for s in self.stages for b in s.blocks]

    def block_position(self, index: int) -> tuple[int, int]:
        """Global 0-based block index -> (0-based stage, 0-based block in stage)."""
        if index < 0:
            raise IndexError(f"block index {index} out of range")
        for si, s in enumerate(self.stages):
            if index < len(s.blocks):
                return si, index
            index -= len(s.blocks)
        raise IndexError("block index out of range")

    def stem(self, x: Tensor) -> Tensor:
        y = T.relu(self.stem_bn(self.stem_conv(x)))
        if self.spec.stem.maxpool:
            y = maxpool(y, 3, 2, padding=1)
        return y

    def features(self, x: Tensor, upto: int | None = None) -> Tensor:
        """Run stem and stages (optionally only the first ``upto`` stages)."""
        y = self.stem(x)
        self.trace = []
        for stage in self.stages[:upto]:
            rec = {} if self.capture else None
            y = stage(y, rec)
            if rec is not None:
                if y.requires_grad:
                    y.retain_grad()
                self.trace.append(rec)
        return y

    def forward(self, x: Tensor) -> Tensor:
        y = self.features(x)
        y = global_avg_pool(y)
        y = T.reshape(y, (y.shape[0], y.shape[-1]))
        if self.head_bn is not None:
            y = self.head_bn(y)
        return self.fc(y)

    def set_gate_detach(self, flag: bool):
        """Treat SDA attention and SE gates as constants in backward."""
        for mod in self.modules():
            if isinstance(mod, SdaParams):
                mod.detach_weights = flag
            elif hasattr(mod, "detach_gate"):
                mod.detach_gate = flag


def build(spec: ArchitectureSpec | str, seed: int = 0) -> Model:
    if isinstance(spec, str):
        spec = preset(spec)
    return Model(spec, seed=seed)


# -- counting --------------------------------------------------------------

def count_params(model: Module) -> int:
    """Learnable scalars; BN running statistics are buffers and not counted."""
    return sum(p.size for p in model.parameters())


def attention_branch_params(spec: ArchitectureSpec) -> int:
    """Direct enumeration of W1, BN(d), W2 and W2's bias over adaptive stages."""
    total = 0
    for s in spec.stages:
        if s.sda != "adaptive":
            continue
        d = bottleneck_width(s.c_out, s.r, s.l_threshold)
        total += s.c_out * d + 2 * d + d * s.m * s.c_out + s.m * s.c_out
    return total


def extra_params_eq6(stages, r: int):
    """``(1/r) * sum_i (m_i + 1) * c_i**2`` evaluated literally.

    ``stages`` is a sequence of ``(m_i, c_i)`` pairs. Returns an int when the
    sum divides evenly by ``r``.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    total = sum((m + 1) * c * c for m, c in stages)
    return total // r if total % r == 0 else total / r


@dataclass
class LayerCost:
    name: str
    macs: int
    elementwise: int


def profile(model: Model, input_shape) -> list[LayerCost]:
    """Per-component MAC and elementwise counts for one image of ``input_shape``.

    ``input_shape`` is ``(h, w)`` or ``(h, w, c)``. One multiply-accumulate is
    one FLOP. Elementwise counts cover BN, ReLU, residual adds, pooling,
    fusion sums and softmax.
    """
    h, w = int(input_shape[0]), int(input_shape[1])
    rows: list[LayerCost] = []
    spec = model.spec
    shape = (h, w, spec.in_channels)
    oh, ow, c = model.stem_conv.out_shape(shape)
    rows.append(LayerCost("stem.conv", model.stem_conv.macs(shape), 2 * oh * ow * c))
    shape = (oh, ow, c)
    if spec.stem.maxpool:
        ph, pw = (oh + 2 - 3) // 2 + 1, (ow + 2 - 3) // 2 + 1
        rows.append(LayerCost("stem.maxpool", 0, ph * pw * c * 9))
        shape = (ph, pw, c)
    for si, stage in enumerate(model.stages):
        for bi, block in enumerate(stage.blocks):
            macs = 0
            elem = 0
            s = shape
            for conv in (block.conv1, block.conv2, block.conv3):
                macs += conv.macs(s)
                s = conv.out_shape(s)
                elem += 2 * math.prod(s)
            if block.proj is not None:
                macs += block.proj.macs(shape)
                elem += math.prod(s)
            if block.se is not None:
                macs += block.se.macs(s)
                elem += 2 * math.prod(s)
            elem += 2 * math.prod(s)
            rows.append(LayerCost(f"stage{si + 1}.block{bi + 1}", macs, elem))
            shape = s
        hw_c = math.prod(shape)
        m = len(stage.blocks)
        if stage.sda is not None:
            rows.append(LayerCost(f"stage{si + 1}.sda", stage.sda.macs() + m * hw_c,
                                  (m - 1) * hw_c + hw_c + 3 * stage.sda.d + 3 * m * shape[2] + hw_c))
        elif stage.spec.sda == "nonadaptive":
            rows.append(LayerCost(f"stage{si + 1}.fusion", 0, (m - 1) * hw_c + 2 * hw_c))
    c = shape[2]
    rows.append(LayerCost("head.gap", 0, math.prod(shape)))
    if model.head_bn is not None:
        rows.append(LayerCost("head.bn", 0, 2 * c))
    rows.append(LayerCost("head.fc", model.fc.c_in * model.fc.c_out, model.fc.c_out))
    return rows


def count_flops(model: Model, input_shape) -> int:
    """Multiply-accumulates of all convolutions and linear maps (MAC == FLOP)."""
    return sum(r.macs for r in profile(model, input_shape))


def count_elementwise(model: Model, input_shape) -> int:
    return sum(r.elementwise for r in profile(model, input_shape))


# -- receptive fields ------------------------------------------------------

@dataclass
class RfState:
    rf: int = 1
    jump: int = 1
    start: float = 0.0
    depth3: int = 0

    def conv(self, k: int, stride: int, padding: int) -> "RfState":
        return RfState(self.rf + (k - 1) * self.jump, self.jump * stride,
                       self.start + ((k - 1) / 2 - padding) * self.jump,
                       self.depth3 + (1 if k == 3 else 0))

    def box(self, y: int, x: int) -> tuple[float, float, float, float]:
        """Inclusive (top, left, bottom, right) input box of output unit (y, x)."""
        half = (self.rf - 1) / 2
        cy, cx = self.start + y * self.jump, self.start + x * self.jump
        return cy - half, cx - half, cy + half, cx + half


@dataclass
class ErfRange:
    rf: list = field(default_factory=list)
    jump: list = field(default_factory=list)
    start: list = field(default_factory=list)
    depth: list = field(default_factory=list)
    erf_proxy: list = field(default_factory=list)
    kernel: int = 3

    @property
    def span(self) -> tuple[int, int]:
        """Smallest and largest theoretical RF available to the stage output."""
        return self.rf[0], self.rf[-1]

    def state(self, i: int) -> RfState:
        return RfState(self.rf[i], self.jump[i], self.start[i], self.depth[i])


def erf_range(stage_spec: StageSpec, upstream_rf: int, upstream_jump: int,
              upstream_start: float = 0.0, upstream_depth: int = 0) -> ErfRange:
    """Per-block theoretical RF and ``K * sqrt(depth)`` ERF proxy for one stage.

    ``depth`` counts the 3x3 layers on the deepest path from the input.
    """
    if upstream_rf < 1:
        raise ValueError("upstream_rf must be >= 1")
    out = ErfRange()
    state = RfState(upstream_rf, upstream_jump, upstream_start, upstream_depth)
    for i in range(stage_spec.m):
        state = state.conv(3, stage_spec.stride if i == 0 else 1, 1)
        out.rf.append(state.rf)
        out.jump.append(state.jump)
        out.start.append(state.start)
        out.depth.append(state.depth3)
        out.erf_proxy.append(out.kernel * math.sqrt(state.depth3))
    return out


def stem_rf(spec: ArchitectureSpec) -> RfState:
    st = spec.stem
    s = RfState().conv(st.kernel, st.stride, st.kernel // 2)
    if st.maxpool:
        s = s.conv(3, 2, 1)
        s.depth3 -= 1
    return s


def network_rf(spec: ArchitectureSpec) -> list[ErfRange]:
    """Chain ``erf_range`` through every stage; a stage's output RF is its last block's."""
    state = stem_rf(spec)
    ranges = []
    for s in spec.stages:
        rng_ = erf_range(s, state.rf, state.jump, state.start, state.depth3)
        ranges.append(rng_)
        state = rng_.state(-1)
    return ranges


def erf_empirical(model: Model, block_index: int, input_shape, seed: int = 0) -> np.ndarray:
    """Input-gradient support of the center unit of a block's ``x + F(x)`` output.

    Runs in inference mode with attention/SE gates held constant, so only the
    convolutional paths contribute. Returns an ``(h, w)`` boolean mask.
    """
    si, bi = model.block_position(block_index)
    h, w = int(input_shape[0]), int(input_shape[1])
    was_training = model.training
    model.eval()
    model.set_gate_detach(True)
    try:
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((1, h, w, model.spec.in_channels)), requires_grad=True)
        y = model.stem(x)
        for stage in model.stages[:si]:
            y = stage(y)
        stage = model.stages[si]
        for block in stage.blocks[: bi + 1]:
            pre, y = block(y)
        cy, cx = pre.shape[1] // 2, pre.shape[2] // 2
        unit = T.reduce_sum(T.take(T.take(pre, cy, axis=1), cx, axis=2))
        T.backward(unit)
        return np.abs(x.grad[0]).sum(axis=-1) > 0
    finally:
        model.set_gate_detach(False)
        model.train(was_training)


def block_output_position(model: Model, block_index: int, input_shape) -> tuple[int, int]:
    """Spatial extent of a block's output for the given input size."""
    si, _ = model.block_position(block_index)
    h, w = int(input_shape[0]), int(input_shape[1])
    st = model.spec.stem
    h = (h + 2 * (st.kernel // 2) - st.kernel) // st.stride + 1
    w = (w + 2 * (st.kernel // 2) - st.kernel) // st.stride + 1
    if st.maxpool:
        h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    for s in model.spec.stages[: si + 1]:
        h, w = (h - 1) // s.stride + 1, (w - 1) // s.stride + 1
    return h, w


def theoretical_box(model: Model, block_index: int, input_shape) -> tuple[float, float, float, float]:
    """RF box (top, left, bottom, right) of the center unit used by ``erf_empirical``."""
    si, bi = model.block_position(block_index)
    state = network_rf(model.spec)[si].state(bi)
    oh, ow = block_output_position(model, block_index, input_shape)
    return state.box(oh // 2, ow // 2)
