"""Command-line pipeline: gen-data, train, finetune, eval, predict.

Exit codes: 0 ok, 2 bad usage/arguments, 3 missing artifact,
4 incompatible checkpoint.
"""

import argparse
import os
import sys

COLOR_MAP = {
    0: (0, 0, 0),       # background
    1: (255, 0, 0),     # figure
    2: (0, 255, 0),     # text
    3: (0, 0, 255),     # table
}


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _model_config(preset):
    from .model import ModelConfig
    return ModelConfig.tiny() if preset == "tiny" else ModelConfig.full()


def cmd_gen_data(args):
    from .synthdoc import CorpusConfig, generate_dataset
    cfg = CorpusConfig.preset(args.preset,
                              page_size=(args.page_size, args.page_size))
    manifest = generate_dataset(args.n, args.seed, cfg, args.out)
    print(f"wrote {manifest['n']} samples to {args.out} "
          f"(class pixels: {manifest['class_pixels']})")
    return 0


def cmd_train(args):
    from .checkpoint import save_checkpoint
    from .model import SegmentationNetwork
    from .training import train
    model = SegmentationNetwork(_model_config(args.preset), seed=args.seed)
    optimizer, rows = train(
        model, args.data, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed, use_augment=not args.no_augment,
        log_path=args.log)
    save_checkpoint(model, args.out, optimizer)
    last = rows[-1]
    print(f"trained {last['step']} steps; final loss {last['loss']:.4f} "
          f"acc {last['acc']:.4f}; checkpoint -> {args.out}")
    return 0


def cmd_finetune(args):
    from .checkpoint import save_checkpoint
    from .training import finetune_plain, finetune_with_dsm
    fn = finetune_plain if args.no_dsm else finetune_with_dsm
    model, optimizer, rows = fn(
        getattr(args, "from"), args.data, steps=args.steps,
        batch_size=args.batch_size, lr=args.lr, seed=args.seed,
        use_augment=not args.no_augment, log_path=args.log)
    save_checkpoint(model, args.out, optimizer)
    mode = "plain" if args.no_dsm else "dynamic-select"
    if rows:
        print(f"{mode} fine-tune, {len(rows)} steps; "
              f"final loss {rows[-1]['loss']:.4f}; checkpoint -> {args.out}")
    else:
        print(f"{mode} fine-tune, 0 steps; checkpoint -> {args.out}")
    return 0


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .metrics import format_table, report_csv
    from .training import REMAP_3CLASS, evaluate
    model, _ = load_checkpoint(args.model)
    remap = REMAP_3CLASS if args.remap3 else None
    report, cm = evaluate(model, args.data, class_remap=remap)
    print(format_table([(args.label, report)]))
    names = ("background", "figure", "text", "table")
    for c, name in enumerate(names):
        print(f"  {name:<10} P {100 * report.precision[c]:5.1f}  "
              f"R {100 * report.recall[c]:5.1f}  "
              f"F1 {100 * report.f1[c]:5.1f}")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report_csv([(args.label, report)]))
    return 0


def cmd_predict(args):
    import numpy as np
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .training import predict_mask
    model, _ = load_checkpoint(args.model)
    try:
        image = np.asarray(Image.open(args.image).convert("RGB"))
    except (FileNotFoundError, OSError) as e:
        print(f"error: cannot read image {args.image}: {e}", file=sys.stderr)
        return 2
    mask = predict_mask(model, image)
    colored = np.zeros((*mask.shape, 3), dtype=np.uint8)
    for cls, rgb in COLOR_MAP.items():
        colored[mask == cls] = rgb
    Image.fromarray(colored).save(args.out)
    if args.raw_out:
        Image.fromarray(mask, mode="L").save(args.raw_out)
    print(f"prediction -> {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="layoutseg",
        description="document layout segmentation pipeline")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/OpenMP thread cap (default 1, deterministic)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=["shift0", "shift1"], default="shift0")
    g.add_argument("--page-size", type=int, default=64)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain a single-path model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--preset", choices=["tiny", "full"], default="tiny")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--log", help="per-step CSV log path")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("finetune", help="fine-tune from a checkpoint")
    f.add_argument("--from", required=True, metavar="CKPT")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--steps", type=int, default=200)
    f.add_argument("--batch-size", type=int, default=8)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--no-dsm", action="store_true",
                   help="plain fine-tune without the dynamic-select split")
    f.add_argument("--no-augment", action="store_true")
    f.add_argument("--log", help="per-step CSV log path")
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--label", default="model")
    e.add_argument("--remap3", action="store_true",
                   help="fold text into background (3-class scoring)")
    e.add_argument("--csv", help="write the report as CSV")
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="colorized mask for one image")
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--raw-out", help="also write the raw class-index mask")
    pr.set_defaults(fn=cmd_predict)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # checkpoint incompatibilities map to 4
        from .checkpoint import UnsupportedVersionError
        from .model import CheckpointIncompatibleError
        if isinstance(e, (CheckpointIncompatibleError,
                          UnsupportedVersionError)):
            print(f"error: {e}", file=sys.stderr)
            return 4
        raise


if __name__ == "__main__":
    sys.exit(main())
