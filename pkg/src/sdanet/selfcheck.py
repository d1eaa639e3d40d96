"""Fast gradient and invariant checks run by ``sdanet selfcheck``."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import BatchNorm, Bottleneck, Conv2d, Linear, SEBlock, global_avg_pool, grouped_softmax, maxpool
from .model import attention_branch_params, build, count_params, erf_empirical, extra_params_eq6, preset, theoretical_box
from .sda import FeatureSequence, SdaParams, nonadaptive_forward, pinned_forward, sda_forward, uniform_weights, weighted_sum
from .tensor import Tensor

GRAD_TOL = 1e-3
SHAPE = (2, 4, 4, 8)
# central differences straddling a relu kink are meaningless; inputs are
# redrawn until the fused pre-activation clears this margin
KINK_MARGIN = 0.02


def projected(fn, x0: Tensor, rng: np.random.Generator):
    """Scalar loss ``sum(w * (fn(x) - fn(x0)))`` with a fixed random ``w``.

    Subtracting the baseline keeps the loss value near zero, so rounding of
    the loss itself does not swamp the central differences.
    """
    with T.no_grad():
        base = fn(x0).data.copy()
    w = Tensor(rng.standard_normal(base.shape))
    b = Tensor(base)
    return lambda t: T.reduce_sum(T.mul(T.sub(fn(t), b), w))


def layer_cases(rng: np.random.Generator) -> dict:
    """Differentiable ops as ``name -> (fn of input tensor, modules to cast[, pre-kink fn])``."""
    conv = Conv2d(8, 8, 3, groups=2, bias=True, rng=rng)
    conv_s2 = Conv2d(8, 4, 3, stride=2, rng=rng)
    bn = BatchNorm(8)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 8)
    lin = Linear(8, 5, rng=rng)
    se = SEBlock(8, 2, rng=rng)
    block = Bottleneck(8, 2, rng=rng)
    block_proj = Bottleneck(8, 4, stride=2, groups=2, se=True, se_reduction=4, rng=rng)
    seq_w = Tensor(rng.standard_normal((3, 1, 1, 8)))
    sda = SdaParams(3, 8, r=4, l_threshold=2, rng=rng)
    sda.w2.weight.data[...] = rng.standard_normal(sda.w2.weight.shape) * 0.5
    sda.bn.gamma.data[:] = rng.uniform(0.5, 1.5, sda.d)

    def blocks(t):
        zs = [T.mul(t, T.take(seq_w, i, axis=0)) for i in range(3)]
        zs[1] = T.add(zs[1], Tensor(np.full(SHAPE, 0.3)))
        return zs

    def stage(t):
        return sda_forward(sda, blocks(t))

    def stage_pre(t):
        zs = blocks(t)
        _, w = sda_forward(sda, zs, return_weights=True)
        return weighted_sum(FeatureSequence(zs), w)

    return {
        "relu": (T.relu, []),
        "conv2d(3x3,g=2,bias)": (conv, [conv]),
        "conv2d(3x3,stride 2)": (conv_s2, [conv_s2]),
        "batchnorm(train)": (bn, [bn]),
        "maxpool(2,2)": (lambda t: maxpool(t, 2, 2), []),
        "global_avg_pool": (global_avg_pool, []),
        "linear": (lambda t: lin(T.reshape(t, (-1, 8))), [lin]),
        "grouped_softmax": (lambda t: grouped_softmax(T.reshape(t, (32, 8)), 2, 4), []),
        "se_block": (se, [se]),
        "bottleneck(identity)": (lambda t: block(t)[0], [block]),
        "bottleneck(proj,se)": (lambda t: block_proj(t)[1], [block_proj]),
        "sda_stage(m=3)": (stage, [sda], stage_pre),
    }


def gradient_errors(dtype=np.float32, seed: int = 0) -> dict[str, float]:
    """Max relative finite-difference error per op at shape (2, 4, 4, 8), eps 1e-3."""
    out = {}
    with T.precision(dtype):
        rng = np.random.default_rng(seed)
        cases = layer_cases(rng)
        for name, (fn, mods, *pre) in cases.items():
            for mod in mods:
                mod.to(dtype)
            x = Tensor(rng.standard_normal(SHAPE))
            for _ in range(50):
                if not pre:
                    break
                with T.no_grad():
                    if np.abs(pre[0](x).data).min() > KINK_MARGIN:
                        break
                x = Tensor(rng.standard_normal(SHAPE))
            f = projected(fn, x, rng)
            out[name] = T.finite_diff_check(f, x, 1e-3)
    return out


def sda_param_errors(dtype=np.float32, seed: int = 0) -> dict[str, float]:
    """Finite-difference error wrt every SDA parameter and every block output."""
    with T.precision(dtype):
        rng = np.random.default_rng(seed)
        sda = SdaParams(3, 8, r=4, l_threshold=2, rng=rng).to(dtype)
        sda.w2.weight.data[...] = rng.standard_normal(sda.w2.weight.shape) * 0.5
        zs = [Tensor(rng.standard_normal(SHAPE)) for _ in range(3)]
        with T.no_grad():
            base = sda_forward(sda, zs).data.copy()
        w = Tensor(rng.standard_normal(base.shape))

        def loss():
            return T.reduce_sum(T.mul(T.sub(sda_forward(sda, zs), Tensor(base)), w))

        named = list(sda.named_parameters()) + [(f"Z{i + 1}", z) for i, z in enumerate(zs)]
        errs = T.check_gradients(loss, [t for _, t in named], 1e-3)
        return {name: e for (name, _), e in zip(named, errs)}


def attention_invariants(trials: int = 1000, seed: int = 0) -> dict[str, float]:
    """Worst-case deviations over random inputs (all should be ~0)."""
    rng = np.random.default_rng(seed)
    worst = {"negative": 0.0, "column_sum": 0.0, "m1_degeneracy": 0.0, "zero_w2_uniform": 0.0}
    with T.no_grad():
        for _ in range(trials):
            m = int(rng.integers(1, 6))
            c = int(rng.choice([4, 8, 16]))
            h = int(rng.integers(1, 5))
            sda = SdaParams(m, c, r=4, l_threshold=2, rng=rng)
            # output comparisons on unit-variance features: float32 rounding grows with |Z|
            unit = [Tensor(rng.standard_normal((2, h, h, c))) for _ in range(m)]
            uniform_out = sda_forward(sda, unit).data
            ref = nonadaptive_forward(unit).data
            worst["zero_w2_uniform"] = max(worst["zero_w2_uniform"], float(np.abs(uniform_out - ref).max()))
            # weights are checked under stressed input scales
            zs = [Tensor(z.data * rng.uniform(0.1, 10)) for z in unit]
            sda.w2.weight.data[...] = rng.standard_normal(sda.w2.weight.shape) * rng.uniform(0.1, 5)
            sda.w2.bias.data[...] = rng.standard_normal(sda.w2.bias.shape)
            out, weights = sda_forward(sda, zs, return_weights=True)
            s = weights.values.astype(np.float64)
            worst["negative"] = max(worst["negative"], float(-min(s.min(), 0.0)))
            worst["column_sum"] = max(worst["column_sum"], float(np.abs(s.sum(axis=1) - 1).max()))
            sda1 = SdaParams(1, c, r=4, l_threshold=2, rng=rng)
            sda1.w2.weight.data[...] = rng.standard_normal(sda1.w2.weight.shape)
            o1 = sda_forward(sda1, zs[:1]).data
            worst["m1_degeneracy"] = max(worst["m1_degeneracy"], float(np.abs(o1 - np.maximum(zs[0].data, 0)).max()))
    return worst


def ablation_equivalence(trials: int = 100, seed: int = 1) -> float:
    """Max |nonadaptive - pinned(1/m)| over random feature sequences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.no_grad():
        for _ in range(trials):
            m = int(rng.integers(1, 7))
            c = int(rng.choice([2, 4, 8]))
            n = int(rng.integers(1, 3))
            zs = [Tensor(rng.standard_normal((n, 3, 3, c))) for _ in range(m)]
            a = nonadaptive_forward(zs).data
            b = pinned_forward(zs, uniform_weights(m, c, n)).data
            worst = max(worst, float(np.abs(a - b).max()))
    return worst


def erf_containment(preset_name: str = "sda-tiny-cifar", size: int = 32) -> dict[int, bool]:
    """Empirical support inside the theoretical RF box, per global block index."""
    model = build(preset_name)
    out = {}
    for idx in range(len(model.blocks)):
        mask = erf_empirical(model, idx, (size, size))
        top, left, bottom, right = theoretical_box(model, idx, (size, size))
        ys, xs = np.nonzero(mask)
        out[idx] = bool(len(ys) == 0 or (ys.min() >= top and ys.max() <= bottom and xs.min() >= left and xs.max() <= right))
    return out


def run(verbose: bool = True) -> bool:
    results: list[tuple[str, bool, str]] = []

    g64 = gradient_errors(np.float64)
    results += [(f"grad[f64] {k}", v < GRAD_TOL, f"{v:.2e}") for k, v in g64.items()]
    p64 = sda_param_errors(np.float64)
    results += [(f"grad[f64] sda.{k}", v < GRAD_TOL, f"{v:.2e}") for k, v in p64.items()]

    inv = attention_invariants(200)
    results.append(("attention non-negative", inv["negative"] == 0.0, f"{inv['negative']:.1e}"))
    results.append(("attention column sums", inv["column_sum"] < 1e-5, f"{inv['column_sum']:.1e}"))
    results.append(("m=1 degeneracy", inv["m1_degeneracy"] < 1e-6, f"{inv['m1_degeneracy']:.1e}"))
    results.append(("zero-W2 uniform equivalence", inv["zero_w2_uniform"] < 1e-6, f"{inv['zero_w2_uniform']:.1e}"))
    eq = ablation_equivalence(100)
    results.append(("nonadaptive == pinned 1/m", eq < 1e-6, f"{eq:.1e}"))

    spec = preset("sda-resnet-86")
    closed = extra_params_eq6([(s.m, s.c_out) for s in spec.stages], 16)
    results.append(("closed-form attention params", closed == 2_564_096, str(closed)))
    direct = attention_branch_params(spec)
    results.append(("attention enumeration", direct == 2_780_032, str(direct)))
    tiny = preset("sda-tiny-cifar")
    diff = count_params(build(tiny)) - count_params(build(tiny.with_sda("off")))
    results.append(("tiny count difference", diff == attention_branch_params(tiny), str(diff)))

    erf = erf_containment()
    results.append(("ERF containment", all(erf.values()), f"{sum(erf.values())}/{len(erf)} blocks"))

    ok = all(r[1] for r in results)
    if verbose:
        for name, passed, detail in results:
            print(f"{'PASS' if passed else 'FAIL'}  {name:40s} {detail}")
        g32 = gradient_errors(np.float32)
        print("info  float32 finite-difference errors (noise-limited, not gated):")
        for k, v in g32.items():
            print(f"        {k:32s} {v:.2e}")
        print("selfcheck:", "PASS" if ok else "FAIL")
    return ok
