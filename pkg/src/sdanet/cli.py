"""Command-line entry point: ``sdanet <subcommand> [flags]``.

Settings resolve as built-in defaults < ``--config`` JSON < explicit flags.
Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, selfcheck
from .data import ImageSet, ScaleSweepSet, default_data_dir, load_cifar10, sweep_factors, synth_multiscale
from .model import (PRESETS, ArchitectureSpec, attention_branch_params, build, count_elementwise, count_flops,
                    count_params, extra_params_eq6, load_spec, network_rf, preset)
from .sda import bottleneck_width
from .train import CheckpointError, TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger("sdanet")

DEFAULTS = {
    "preset": "sda-tiny-cifar",
    "arch": None,
    "width": None,
    "dataset": "cifar10",
    "data": None,
    "out": "runs",
    "seed": 0,
    "checkpoint": None,
    # training
    "epochs": 30,
    "lr": 0.1,
    "batch_size": 128,
    "momentum": 0.9,
    "weight_decay": 1e-4,
    "step_size": 15,
    "decay": 0.1,
    "label_smoothing": 0.1,
    "augment": True,
    "train_size": None,
    "test_size": None,
    "train_scales": [0.3, 2.2],
    # analysis
    "scale_min": 0.14,
    "scale_max": 2.0,
    "stage": None,
    "samples": 200,
    "image_index": 0,
    "count": 1,
    "class_index": None,
    "size": None,
}

SYNTH_TRAIN_SIZE, SYNTH_TEST_SIZE = 2000, 500
# synthetic data seeds, offset from the root seed
SEED_SYNTH_TRAIN, SEED_SYNTH_TEST, SEED_SYNTH_SWEEP = 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, model=True, data=True):
    p.add_argument("--config", help="JSON file of settings (unknown keys rejected)")
    p.add_argument("--seed", type=int, help="root seed (default 0)")
    p.add_argument("--out", help="output directory (default runs)")
    if model:
        p.add_argument("--preset", choices=sorted(PRESETS), help="architecture preset (default sda-tiny-cifar)")
        p.add_argument("--arch", help="architecture JSON file; overrides --preset")
        p.add_argument("--width", type=int, help="stem width for tiny presets; stage widths scale with it")
    if data:
        p.add_argument("--dataset", choices=("cifar10", "synthetic"), help="default cifar10")
        p.add_argument("--data", help="CIFAR-10 directory (default $SDA_DATA_DIR)")
        p.add_argument("--train-size", type=int, dest="train_size", help="use the first N training images")
        p.add_argument("--test-size", type=int, dest="test_size", help="use the first N test images")


def make_parser() -> Parser:
    parser = Parser(prog="sdanet", description="Depth-attention residual networks: build, train, count, analyse.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model, write metrics CSV and checkpoint",
                       description="Train with momentum SGD and a step schedule; writes metrics.csv and model.sdac.")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--no-augment", action="store_const", const=False, dest="augment", help="disable crop/flip")

    p = sub.add_parser("eval", help="top-1/top-5 accuracy of a checkpoint",
                       description="Evaluate a checkpoint on the test split.")
    _common(p, model=False)
    p.add_argument("--checkpoint", help="checkpoint file (required)")

    p = sub.add_parser("count", help="parameter / FLOP table for an architecture",
                       description="Count parameters and multiply-accumulates, and reconcile the attention branch "
                                   "with its closed-form estimate.")
    _common(p, data=False)
    p.add_argument("--size", type=int, help="input side length (default 224, or 32 for tiny presets)")

    p = sub.add_parser("erf", help="per-block theoretical receptive field table",
                       description="Per-block receptive field, jump, 3x3 depth and K*sqrt(depth) proxy.")
    _common(p, data=False)

    p = sub.add_parser("attention-sweep", help="attention mean/variance across input scales",
                       description="Rescale images over a factor range, record per-block attention statistics "
                                   "and write attention_sweep.csv.")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint (default: freshly built --preset)")
    p.add_argument("--scale-min", type=float, dest="scale_min")
    p.add_argument("--scale-max", type=float, dest="scale_max")
    p.add_argument("--stage", type=int, help="1-based stage for the printed trend (default 2)")
    p.add_argument("--samples", type=int, help="number of base images (default 200)")

    p = sub.add_parser("cam", help="Grad-CAM heatmaps as PPM files",
                       description="Write Grad-CAM heatmaps, overlays and source images as binary PPM.")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint (default: freshly built --preset)")
    p.add_argument("--stage", type=int, help="1-based stage (default: last)")
    p.add_argument("--image-index", type=int, dest="image_index", help="first test image (default 0)")
    p.add_argument("--count", type=int, help="number of images (default 1)")
    p.add_argument("--class-index", type=int, dest="class_index", help="target class (default: true label)")

    p = sub.add_parser("selfcheck", help="gradient and invariant checks",
                       description="Finite-difference gradient checks and attention/count/receptive-field invariants.")
    p.add_argument("--config", help=argparse.SUPPRESS)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        sub = doc.pop("subcommand", args.command)
        if sub != args.command:
            raise UsageError(f"config is for subcommand {sub!r}, not {args.command!r}")
        unknown = sorted(set(doc) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        cfg.update(doc)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    return cfg


def model_spec(cfg: dict, num_classes: int | None = None) -> ArchitectureSpec:
    if cfg["arch"]:
        spec = load_spec(cfg["arch"])
        if num_classes is not None:
            spec = replace(spec, num_classes=num_classes)
    else:
        spec = preset(cfg["preset"], num_classes)
    if cfg["width"]:
        spec = scale_width(spec, int(cfg["width"]))
    spec.validate()
    return spec


def scale_width(spec: ArchitectureSpec, width: int) -> ArchitectureSpec:
    """Rescale stem and stage widths by ``width / stem.channels``."""
    base = spec.stem.channels
    if width < 1 or any(s.c_mid * width % base for s in spec.stages):
        raise ValueError(f"width {width} does not divide the stage widths evenly")
    stages = tuple(replace(s, c_mid=s.c_mid * width // base, c_out=s.c_out * width // base, c_in=None)
                   for s in spec.stages)
    return replace(spec, stem=replace(spec.stem, channels=width), stages=stages)


def load_data(cfg: dict, split: str) -> ImageSet:
    if cfg["dataset"] == "synthetic":
        lo, hi = cfg["train_scales"]
        if split == "train":
            n, seed = cfg["train_size"] or SYNTH_TRAIN_SIZE, cfg["seed"] + SEED_SYNTH_TRAIN
        else:
            n, seed = cfg["test_size"] or SYNTH_TEST_SIZE, cfg["seed"] + SEED_SYNTH_TEST
        return synth_multiscale(n, (lo, hi), seed=seed)
    path = cfg["data"] or default_data_dir()
    if not path:
        raise UsageError("CIFAR-10 needs --data or SDA_DATA_DIR (or use --dataset synthetic)")
    data = load_cifar10(path, split)
    limit = cfg["train_size"] if split == "train" else cfg["test_size"]
    return data.subset(np.arange(min(limit, len(data)))) if limit else data


def load_model(cfg: dict, num_classes: int | None):
    if cfg["checkpoint"]:
        model, header = load_checkpoint(Path(cfg["checkpoint"]).read_bytes())
        if num_classes is not None and model.spec.num_classes != num_classes:
            raise UsageError(f"checkpoint has {model.spec.num_classes} classes, data has {num_classes}")
        return model
    log.warning("no checkpoint given; using an untrained %s", cfg["arch"] or cfg["preset"])
    return build(model_spec(cfg, num_classes), seed=cfg["seed"])


def out_dir(cfg: dict) -> Path:
    path = Path(cfg["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- subcommands -----------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    tcfg = TrainConfig(lr0=cfg["lr"], momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                       epochs=cfg["epochs"], step_size=cfg["step_size"], decay=cfg["decay"],
                       batch_size=cfg["batch_size"], label_smoothing=cfg["label_smoothing"], seed=cfg["seed"],
                       augment=bool(cfg["augment"]))
    tcfg.validate()
    train_data = load_data(cfg, "train")
    test_data = load_data(cfg, "test")
    model = build(model_spec(cfg, train_data.num_classes), seed=cfg["seed"])
    out = out_dir(cfg)

    def show(row):
        print(" ".join(f"{k}={analysis._fmt(v)}" for k, v in row.items()), flush=True)

    result = train(model, train_data, test_data, tcfg, on_epoch=show)
    analysis.write_csv(result.history, out / "metrics.csv")
    (out / "model.sdac").write_bytes(result.checkpoint)
    print(f"wrote {out / 'metrics.csv'} and {out / 'model.sdac'}")
    return 0


def cmd_eval(cfg: dict) -> int:
    if not cfg["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    data = load_data(cfg, "test")
    model = load_model(cfg, data.num_classes)
    acc = evaluate(model, data)
    print(json.dumps({k: round(v, 6) for k, v in acc.items()} | {"n": len(data)}, sort_keys=True))
    return 0


def _si(n: float, unit: str) -> str:
    for scale, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(n) >= scale:
            return f"{n / scale:.2f}{suffix}{unit}"
    return f"{n:g}{unit}"


def count_report(spec: ArchitectureSpec, size: int) -> list[tuple[str, str]]:
    model = build(spec)
    params = count_params(model)
    macs = count_flops(model, (size, size))
    rows = [
        ("Architecture", spec.name),
        ("Input", f"{size}x{size}x{spec.in_channels}"),
        ("Params", f"{params:,} ({_si(params, '')})"),
        ("FLOPs (MACs)", f"{macs:,} ({_si(macs, '')})"),
        ("Elementwise ops", f"{count_elementwise(model, (size, size)):,}"),
    ]
    adaptive = [s for s in spec.stages if s.sda == "adaptive"]
    if adaptive:
        trunk = count_params(build(spec.with_sda("off")))
        direct = attention_branch_params(spec)
        rs = {s.r for s in adaptive}
        closed = extra_params_eq6([(s.m, s.c_out) for s in adaptive], adaptive[0].r) if len(rs) == 1 else None
        floor = sum(bottleneck_width(s.c_out, s.r, s.l_threshold) * s.c_out * (s.m + 1) for s in adaptive)
        bn = sum(2 * bottleneck_width(s.c_out, s.r, s.l_threshold) for s in adaptive)
        bias = sum(s.m * s.c_out for s in adaptive)
        rows += [
            ("Trunk params (SDA off)", f"{trunk:,}"),
            ("Attention params", f"{params - trunk:,} (model - trunk)"),
            ("Direct enumeration", f"{direct:,} (W1 + BN + W2 + W2 bias)"),
        ]
        if closed is not None:
            rows += [
                ("Closed-form (m+1)c^2/r", f"{closed:,}"),
                ("Enumeration / closed-form", f"{direct / closed:.4f}"),
                ("  d = max(c/r, L) weights", f"{floor - closed:+,}"),
                ("  attention BN scale+shift", f"{bn:+,}"),
                ("  W2 bias", f"{bias:+,}"),
            ]
    return rows


def cmd_count(cfg: dict) -> int:
    spec = model_spec(cfg)
    size = cfg["size"] or (32 if spec.stem.kernel == 3 else 224)
    rows = count_report(spec, size)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    if any(k.startswith("Closed-form") for k, _ in rows):
        print("note: the closed form takes d = c/r for every stage and ignores the attention BN and the W2 bias;\n"
              "      the three lines above account for the whole gap to the direct enumeration.")
    return 0


def erf_rows(spec: ArchitectureSpec) -> list[dict]:
    rows = []
    for si, r in enumerate(network_rf(spec)):
        for bi in range(len(r.rf)):
            rows.append({"stage": si + 1, "block": bi + 1, "rf": r.rf[bi], "jump": r.jump[bi],
                         "depth": r.depth[bi], "erf_proxy": round(r.erf_proxy[bi], 4)})
    return rows


def cmd_erf(cfg: dict) -> int:
    spec = model_spec(cfg)
    rows = erf_rows(spec)
    header = list(rows[0])
    lines = [",".join(header)] + [",".join(str(r[h]) for h in header) for r in rows]
    print("\n".join(lines))
    if cfg["out"] != DEFAULTS["out"]:
        path = out_dir(cfg) / "erf.csv"
        path.write_text("\n".join(lines) + "\n")
        print(f"wrote {path}")
    return 0


def sweep_base(cfg: dict) -> ImageSet:
    if cfg["dataset"] == "synthetic":
        return synth_multiscale(cfg["samples"], 1.0, seed=cfg["seed"] + SEED_SYNTH_SWEEP)
    return load_data(dict(cfg, test_size=cfg["samples"]), "test")


def cmd_attention_sweep(cfg: dict) -> int:
    if not 0 < cfg["scale_min"] <= cfg["scale_max"]:
        raise UsageError("need 0 < --scale-min <= --scale-max")
    base = sweep_base(cfg)
    model = load_model(cfg, base.num_classes)
    stage = cfg["stage"] or analysis.DEFAULT_STAGE
    if stage not in analysis.sda_stages(model):
        raise UsageError(f"stage {stage} has no adaptive attention; SDA stages: {analysis.sda_stages(model)}")
    sweep = ScaleSweepSet(base, sweep_factors(cfg["scale_min"], cfg["scale_max"]), base.images.shape[1])
    report = analysis.attention_sweep(model, sweep)
    path = analysis.write_csv(report, out_dir(cfg) / "attention_sweep.csv")
    print(f"wrote {path}")
    for block, rho in report.trend(stage).items():
        scales, means = report.series(stage, block)
        print(f"stage {stage} block {block}: spearman {rho:+.3f}  mean {means[0]:.4f} -> {means[-1]:.4f}")
    return 0


def cmd_cam(cfg: dict) -> int:
    data = load_data(dict(cfg, test_size=cfg["image_index"] + cfg["count"]), "test")
    model = load_model(cfg, data.num_classes)
    stage = cfg["stage"] or len(model.stages)
    out = out_dir(cfg)
    stop = cfg["image_index"] + cfg["count"]
    if not 0 <= cfg["image_index"] < stop <= len(data):
        raise UsageError(f"image range [{cfg['image_index']}, {stop}) outside the {len(data)} test images")
    for i in range(cfg["image_index"], stop):
        img = data[i]
        cls = img.label if cfg["class_index"] is None else cfg["class_index"]
        heat = analysis.grad_cam(model, img, cls, stage, data)
        analysis.write_ppm(img, out / f"image_{i}.ppm")
        analysis.write_ppm(heat, out / f"cam_{i}.ppm")
        analysis.write_ppm(heat, out / f"cam_{i}_overlay.ppm", overlay=img)
        print(f"image {i}: class {cls} score {heat.score:.4f} -> {out / f'cam_{i}.ppm'}")
    return 0


def cmd_selfcheck(cfg: dict) -> int:
    return 0 if selfcheck.run() else 2


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "count": cmd_count,
    "erf": cmd_erf,
    "attention-sweep": cmd_attention_sweep,
    "cam": cmd_cam,
    "selfcheck": cmd_selfcheck,
}


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError, CheckpointError, FileNotFoundError) as exc:
        print(f"sdanet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        log.exception("runtime failure")
        print(f"sdanet {args.command}: failed: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
