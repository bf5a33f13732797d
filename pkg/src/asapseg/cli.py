"""Command-line front end: gen / train / eval / ablate / flops / gradcheck / bench."""

import argparse
import os
import sys
import time

import numpy as np

from .autograd import Tensor, fresh_tape, no_grad, tmean
from .config import RunConfig
from .data import CLASS_NAMES, SegDataset, resize_image, write_dataset
from .errors import ConfigError, FormatError
from .flops import (AttentionDims, FusionDims, fit_attention_operating_point,
                    fit_fusion_operating_point, flops_attention, flops_fusion,
                    flops_report)
from .gradcheck import finite_diff_check
from .kernels import BACKEND, HAVE_COMPILED
from .losses import miou
from .model import VARIANTS, build_variant
from .train import (TrainState, evaluate, fit, load_checkpoint,
                    save_checkpoint, train_loop)


def _add_config_args(p):
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one option")


def _load_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be section.key=value")
        dotted, raw = item.split("=", 1)
        cfg.set_option(dotted.strip(), raw)
    return cfg


def _echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(cfg.to_text())


def _print_iou(per_class, mean):
    for name, v in zip(CLASS_NAMES, per_class):
        print(f"  iou[{name}] = {v:.4f}")
    print(f"  miou = {mean:.4f}")


def cmd_gen(args):
    cfg = _load_config(args)
    spec = cfg.data.scene_spec()
    write_dataset(args.out, spec, cfg.data.count,
                  val_fraction=cfg.data.val_fraction)
    print(f"wrote {cfg.data.count} scenes "
          f"({spec.width}x{spec.height}) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    _echo_config(cfg, args.out)
    model = build_variant(cfg.model.variant, n_classes=cfg.model.n_classes,
                          seed=cfg.model.seed)
    if args.resume:
        state = load_checkpoint(args.resume, model)
        print(f"resumed from {args.resume} at step {state.step}")
        trace_path = os.path.join(args.out, "trace.tsv")
        train_loop(state, args.data, cfg.train, loss_weights=cfg.loss,
                   aug=cfg.augment, trace_path=trace_path, log=print)
        save_checkpoint(os.path.join(args.out, "checkpoint.bin"), state)
    else:
        state, _ = fit(model, args.data, cfg.train, out_dir=args.out,
                       loss_weights=cfg.loss, log=print)
    per_class, mean = evaluate(model, SegDataset(args.data, "val"))
    print(f"final (step {state.step}):")
    _print_iou(per_class, mean)
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    model = build_variant(cfg.model.variant, n_classes=cfg.model.n_classes,
                          seed=cfg.model.seed)
    load_checkpoint(args.ckpt, model)
    per_class, mean = evaluate(model, SegDataset(args.data, args.split))
    _print_iou(per_class, mean)
    return 0


def cmd_ablate(args):
    cfg = _load_config(args)
    rows = []
    for variant in args.variants:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        for seed in args.seeds:
            model = build_variant(variant, n_classes=cfg.model.n_classes,
                                  seed=seed)
            cfg.train.seed = seed
            state, _ = fit(model, args.data, cfg.train, loss_weights=cfg.loss)
            per_class, mean = evaluate(model, SegDataset(args.data, "val"))
            rows.append((variant, seed, mean, per_class))
            print(f"{variant} seed={seed}: miou {mean:.4f}  "
                  + " ".join(f"{n}={v:.3f}"
                             for n, v in zip(CLASS_NAMES, per_class)))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.tsv"), "w") as f:
            f.write("variant\tseed\tmiou\t" + "\t".join(CLASS_NAMES) + "\n")
            for variant, seed, mean, per_class in rows:
                f.write(f"{variant}\t{seed}\t{mean:.6f}\t"
                        + "\t".join(f"{v:.6f}" for v in per_class) + "\n")
    for variant in args.variants:
        means = [r[2] for r in rows if r[0] == variant]
        print(f"{variant}: mean miou over {len(means)} seeds "
              f"= {np.mean(means):.4f}")
    return 0


def cmd_flops(args):
    if args.model:
        model = build_variant(args.variant)
        table = flops_report(model, (args.height, args.width))
        print(table.text())
        return 0
    att = fit_attention_operating_point()
    d = att.dims
    print(f"attention operating point: C={d.channels} Chat={d.reduced} "
          f"H={d.height} W={d.width}")
    for kind in ("conventional", "vertical", "horizontal"):
        t = flops_attention(kind, d)
        print(f"\n[{kind}] total {t.total_flops / 1e9:.4f} GFLOPs")
        print(t.text())
    print(f"\nconventional/vertical ratio: {att.ratio:.1f}")
    fus = fit_fusion_operating_point()
    print(f"\nfusion operating point: d={fus.dims.width} "
          f"k={fus.dims.context_kernel}")
    for kind in ("general", "ffdn"):
        t = flops_fusion(kind, fus.dims)
        print(f"\n[{kind}] total {t.total_flops / 1e9:.4f} GFLOPs")
        print(t.text())
    print(f"\ngeneral/ffdn ratio: {fus.ratio:.2f}")
    return 0


def cmd_gradcheck(args):
    model = build_variant(args.variant, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(1, 3, 32, 32))
    w = rng.normal(size=(1, 5, 32, 32))
    with no_grad(), fresh_tape():
        # a multi-sample training pass seeds batch-norm running statistics;
        # a single-sample warm-up would leave zero variance at the 1x1
        # deepest stage and park every activation there on a relu kink
        model(Tensor(rng.normal(size=(4, 3, 32, 32))), training=True)

    def f(t):
        logits = model(t, training=False)
        return tmean(logits * Tensor(w))

    report = finite_diff_check(f, x, coords=args.coords, rng=rng)
    print(report)
    return 0 if report.passed else 1


def cmd_bench(args):
    model = build_variant(args.variant)
    rng = np.random.default_rng(0)
    source = rng.random((3, args.source_height, args.source_width))
    with no_grad(), fresh_tape():
        # seed batch-norm running statistics so eval-mode forward is defined
        model(Tensor(resize_image(source, (args.height, args.width))[None]),
              training=True)

    def run():
        t0 = time.perf_counter()
        image = resize_image(source, (args.height, args.width))
        with fresh_tape():
            model(Tensor(image[None]), training=False)
        return time.perf_counter() - t0

    for _ in range(args.warmup):
        run()
    times = np.array([run() for _ in range(args.repeats)])
    print(f"backend={BACKEND} compiled_available={HAVE_COMPILED}")
    print(f"forward {args.source_width}x{args.source_height} -> "
          f"{args.width}x{args.height} (resize included), "
          f"{args.repeats} runs after {args.warmup} warmup:")
    print(f"  mean {times.mean() * 1e3:.2f} ms  "
          f"p50 {np.percentile(times, 50) * 1e3:.2f} ms  "
          f"p95 {np.percentile(times, 95) * 1e3:.2f} ms")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="asapseg",
        description="directional-attention semantic segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    _add_config_args(g)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_config_args(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="val")
    _add_config_args(e)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare model variants")
    a.add_argument("--data", required=True)
    a.add_argument("--out")
    a.add_argument("--variants", nargs="+", default=["full", "no_attention"])
    a.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    _add_config_args(a)
    a.set_defaults(fn=cmd_ablate)

    f = sub.add_parser("flops", help="analytic cost tables and ratios")
    f.add_argument("--model", action="store_true",
                   help="trace one model forward instead of the comparisons")
    f.add_argument("--variant", default="full")
    f.add_argument("--height", type=int, default=64)
    f.add_argument("--width", type=int, default=128)
    f.set_defaults(fn=cmd_flops)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check")
    c.add_argument("--variant", default="full")
    c.add_argument("--coords", type=int, default=24)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="forward-pass latency")
    b.add_argument("--variant", default="full")
    b.add_argument("--source-height", type=int, default=128)
    b.add_argument("--source-width", type=int, default=256)
    b.add_argument("--height", type=int, default=64)
    b.add_argument("--width", type=int, default=128)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--repeats", type=int, default=30)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
