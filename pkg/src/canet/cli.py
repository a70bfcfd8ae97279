"""Command line interface.

Subcommands: preprocess, train, eval, predict, baseline thin, synth.
Every failure prints a single diagnostic line to stderr and exits nonzero.
"""

import argparse
import os
import sys

import numpy as np

from canet import data, image, train
from canet.config import INPUT_MODES, load_config


def _cmd_preprocess(args):
    names = sorted(
        n for n in os.listdir(args.input_dir) if n.endswith(".pgm")
    )
    if not names:
        raise ValueError(f"{args.input_dir}: no .pgm files found")
    os.makedirs(args.output_dir, exist_ok=True)
    for name in names:
        mask = image.load_image(os.path.join(args.input_dir, name))
        net_input = data.preprocess(args.mode, mask)
        gray = np.rint(net_input * 255.0).astype(np.uint8)
        image.save_pgm_gray(os.path.join(args.output_dir, name), gray)
    print(f"wrote {len(names)} {args.mode} maps to {args.output_dir}")
    return 0


def _cmd_train(args):
    cfg = load_config(args.config)
    trainer, history = train.train_from_config(cfg, log=print)
    print(f"finished {history['steps_run']} steps; "
          f"final checkpoint {cfg.checkpoint_path}; "
          f"best split-test F1 {history['best_f1']:.6f} "
          f"({train.best_checkpoint_path(cfg.checkpoint_path)})")
    return 0


def _cmd_eval(args):
    report = train.evaluate_checkpoint(
        args.checkpoint, args.shapes_dir, args.skeletons_dir, args.threshold
    )
    print(report.to_text())
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_delimited())
        print(f"wrote delimited report to {args.report}")
    return 0


def _cmd_predict(args):
    checkpoint = train.load_checkpoint(args.checkpoint)
    model = train.restore_model(checkpoint)
    threshold = args.threshold
    if threshold is None:
        threshold = checkpoint.threshold
    if threshold is None:
        raise ValueError(
            f"{args.checkpoint} stores no threshold; pass --threshold"
        )
    shape_mask = image.load_image(args.input)
    skeleton, prob = train.predict(
        model, checkpoint.config.input_mode, shape_mask, threshold
    )
    image.save_image(args.output, skeleton)
    if args.prob_out:
        gray = np.rint(prob * 255.0).astype(np.uint8)
        image.save_pgm_gray(args.prob_out, gray)
    if args.overlay_out:
        overlay = np.where(
            skeleton, 255, np.where(shape_mask, 96, 0)
        ).astype(np.uint8)
        image.save_pgm_gray(args.overlay_out, overlay)
    print(f"wrote skeleton ({int(skeleton.sum())} pixels, "
          f"threshold {threshold:.2f}) to {args.output}")
    return 0


def _cmd_baseline_thin(args):
    mask = image.load_image(args.input)
    thinned = image.zhang_suen_thinning(mask)
    image.save_image(args.output, thinned)
    print(f"wrote thinned mask ({int(thinned.sum())} pixels) to {args.output}")
    return 0


def _cmd_synth(args):
    stems = data.generate_synthetic(args.count, args.size, args.seed,
                                    args.out)
    print(f"wrote {len(stems)} shape/skeleton pairs to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="canet",
        description="Skeleton extraction: preprocessing, training, "
                    "evaluation, prediction and a thinning baseline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess",
                       help="turn shape masks into network input maps")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--mode", required=True, choices=INPUT_MODES)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shapes-dir", required=True)
    p.add_argument("--skeletons-dir", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--report", default=None,
                   help="also write the delimited report to this path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict",
                       help="extract a skeleton from one shape image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--prob-out", default=None)
    p.add_argument("--overlay-out", default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("baseline", help="classical baselines")
    baseline_sub = p.add_subparsers(dest="baseline_command", required=True)
    thin = baseline_sub.add_parser("thin", help="morphological thinning")
    thin.add_argument("--input", required=True)
    thin.add_argument("--output", required=True)
    thin.set_defaults(func=_cmd_baseline_thin)

    p = sub.add_parser("synth", help="generate synthetic labeled pairs")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"canet: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
