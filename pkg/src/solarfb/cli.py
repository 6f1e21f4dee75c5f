"""Command-line entry points for reproducible experiments.

Subcommands: synth, train, eval-classify, eval-detect, detect, gradcheck.
Every run echoes its effective configuration to ``<out>/config.json`` so
it can be replayed exactly. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import activation_maps as am
from . import data, models, mpcnn, training
from .evaluation import common_tp_set, confusion, iou_from_counts, roc_auc, \
    threshold_sweep
from .gradcheck import model_gradcheck
from .models import CheckpointError
from .ops import NumericError

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

METHODS = ("avg", "cam", "gradcam", "mpcnn-cam", "mpcnn-gradcam")
GAP_ONLY_METHODS = ("cam", "mpcnn-cam")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _echo_config(out_dir, args, subcommand):
    os.makedirs(out_dir, exist_ok=True)
    payload = {"subcommand": subcommand}
    payload.update({k: v for k, v in vars(args).items() if k != "func"})
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    patches, labels, masks = data.synth_generate(args.pos, args.neg, args.seed,
                                                 noise=args.noise)
    data.write_dataset(args.out, patches, labels, masks,
                       provenance=f"synthetic seed={args.seed} noise={args.noise}")
    _echo_config(args.out, args, "synth")
    print(f"wrote {args.pos} positive / {args.neg} negative patches to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    dataset = data.load_dataset(args.data)
    val = data.load_dataset(args.val) if args.val else None
    config = training.TrainConfig(
        iterations=args.iters,
        batch_size=args.batch,
        positives_per_batch=args.pos_per_batch,
        learning_rate=args.lr,
        momentum=args.momentum,
        dropout_rate=args.dropout,
        seed=args.seed,
        augment=args.augment,
        eval_every=args.eval_every,
    )
    params = models.init_model(args.model, seed=args.seed)
    params, log = training.train(params, dataset, config, val_dataset=val)
    os.makedirs(args.out, exist_ok=True)
    meta = {"iterations": config.iterations, "seed": config.seed,
            "loss_digest": log.loss_digest()}
    models.save_checkpoint(params, os.path.join(args.out, "checkpoint.fbn"), meta)
    log.to_jsonl(os.path.join(args.out, "train_log.jsonl"))
    _echo_config(args.out, args, "train")
    last = log.losses[-1] if log.losses else float("nan")
    print(f"trained {args.model} for {config.iterations} steps, last loss {last:.4f}")
    if log.evals:
        best = max(log.evals, key=lambda e: e["val_iou"])
        print(f"best validation IoU {best['val_iou']:.4f} at step {best['step']} "
              f"(threshold {best['val_threshold']:.4f})")
    return 0


# ---------------------------------------------------------------------------
# eval-classify


def cmd_eval_classify(args):
    dataset = data.load_dataset(args.data)
    params = models.load_checkpoint(args.checkpoint)
    probs = training.positive_probs(params, dataset.patches)
    os.makedirs(args.out, exist_ok=True)
    threshold = args.threshold
    if args.sweep:
        sweep = threshold_sweep(probs, dataset.labels)
        threshold = sweep.best_threshold
        with open(os.path.join(args.out, "threshold_sweep.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "iou"])
            for t, iou in sweep.curve:
                w.writerow([f"{t:.10g}", f"{iou:.10g}"])
    preds = (probs >= threshold).astype(np.int64)
    c = confusion(preds, dataset.labels)
    iou = iou_from_counts(c)
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "tp_rate", "tn_rate", "iou"])  # Table-4 column order
        w.writerow([params.variant, f"{c.tp_rate:.6f}", f"{c.tn_rate:.6f}",
                    f"{iou:.6f}"])
    _echo_config(args.out, args, "eval-classify")
    print(f"{params.variant}: threshold {threshold:.4f}  TP rate {c.tp_rate:.6f}  "
          f"TN rate {c.tn_rate:.6f}  IoU {iou:.6f}")
    return 0


# ---------------------------------------------------------------------------
# eval-detect


def _parse_entry(spec: str):
    """name=checkpoint:method[:threshold]"""
    try:
        name, rest = spec.split("=", 1)
        parts = rest.split(":")
        if len(parts) == 2:
            path, method, threshold = parts[0], parts[1], 0.5
        else:
            path, method, threshold = parts[0], parts[1], float(parts[2])
    except (ValueError, IndexError):
        raise UsageError(
            f"bad --entry {spec!r}, expected name=checkpoint:method[:threshold]"
        )
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}, expected one of {METHODS}")
    return name, path, method, threshold


def _patch_map(params, patch, method, resolution, config):
    size = (resolution, resolution)
    if method == "avg":
        res = models.forward(params, patch[None], mode="eval")
        branches = am._branch_features(params, res)
        m = am.cam(branches, np.full(sum(b.shape[0] for b in branches),
                                     1.0 / sum(b.shape[0] for b in branches)),
                   target_size=size)
        return am.normalize_map(m)
    if method == "cam":
        return am.normalize_map(am.model_cam(params, patch, target_size=size))
    if method == "gradcam":
        return am.normalize_map(am.grad_cam(params, patch, target_size=size))
    # m-PCNN fusion: per-branch features resized to the working resolution,
    # beta from the positive-class FC weights (cam) or grad-cam weights
    res = models.forward(params, patch[None], mode="eval")
    branches = am._branch_features(params, res)
    stack = np.concatenate(
        [np.stack([am.resize_nearest(ch, *size) for ch in b]) for b in branches]
    )
    if method == "mpcnn-cam":
        weights = params.fc.weights[models.POSITIVE]
    else:  # mpcnn-gradcam
        g = am.grad_cam(params, patch, target_size=size)
        if g.degenerate:
            return g
        weights = g.meta["channel_weights"]
    return mpcnn.mpcnn_fuse(stack, weights, config)


def cmd_eval_detect(args):
    dataset = data.load_dataset(args.data)
    if dataset.masks is None:
        raise data.DataFormatError(f"{args.data}: detection needs masks.bin")
    entries = [_parse_entry(s) for s in args.entry]
    checkpoints = {}
    for _, path, method, _ in entries:
        if path not in checkpoints:
            checkpoints[path] = models.load_checkpoint(path)
        variant = checkpoints[path].variant
        if method in GAP_ONLY_METHODS and variant not in ("inet_gap", "fbnet"):
            raise UsageError(
                f"method {method!r} needs FC channel weights from a GAP head; "
                f"variant {variant!r} has none"
            )
    labels = np.asarray(dataset.labels)
    preds = {}
    for path, params in checkpoints.items():
        probs = training.positive_probs(params, dataset.patches)
        thr = {p: t for _, p, _, t in entries}[path]
        preds[path] = (probs >= thr).astype(np.int64)
    common = common_tp_set(preds, labels)
    if common.size == 0:
        raise data.DataFormatError(
            "common true-positive set is empty; nothing to evaluate"
        )
    res = args.resolution
    truths = [am.resize_nearest(dataset.masks[i].astype(np.uint8), res, res)
              for i in common]
    config = mpcnn.MPcnnConfig(linking_size=args.linking_size,
                               max_iters=args.mpcnn_iters)
    os.makedirs(args.out, exist_ok=True)
    summary = []
    for name, path, method, _ in entries:
        params = checkpoints[path]
        patches = [np.asarray(dataset.patches[i], dtype=np.float32) for i in common]
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            maps = list(pool.map(
                lambda p: _patch_map(params, p, method, res, config), patches))
        if args.dump_maps:
            for i, m in zip(common, maps):
                data.write_pgm(m, os.path.join(args.out, f"{name}_{i:06d}.pgm"))
        curve = roc_auc(maps, truths)
        curve.write_csv(os.path.join(args.out, f"roc_{name}.csv"))
        summary.append((name, method, curve.auc, common.size))
    with open(os.path.join(args.out, "auc_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "method", "auc", "n_samples"])
        for row in summary:
            w.writerow([row[0], row[1], f"{row[2]:.6f}", row[3]])
    _echo_config(args.out, args, "eval-detect")
    for name, method, auc, n in summary:
        print(f"{name} ({method}): AUC {auc:.4f} over {n} common-TP samples")
    return 0


# ---------------------------------------------------------------------------
# detect (scene inference)


def cmd_detect(args):
    scene = data.load_scene(args.scene)
    params = models.load_checkpoint(args.checkpoint)
    tiles, coords = data.tile_scene(np.asarray(scene))
    rows = max(r for r, _ in coords) + 1
    cols = max(c for _, c in coords) + 1
    probs = training.positive_probs(params, tiles)
    config = mpcnn.MPcnnConfig(linking_size=args.linking_size,
                               max_iters=args.mpcnn_iters)
    tile_maps, tile_coords = [], []
    for i, (coord, p) in enumerate(zip(coords, probs)):
        if p >= args.threshold:
            m = _patch_map(params, tiles[i], args.method, args.resolution, config)
            tile_maps.append(m)
            tile_coords.append(coord)
    stitched = data.stitch_maps(tile_maps, tile_coords, rows, cols)
    os.makedirs(args.out, exist_ok=True)
    data.write_pgm(stitched, os.path.join(args.out, "scene_map.pgm"))
    _echo_config(args.out, args, "detect")
    print(f"{len(tile_coords)} of {len(coords)} tiles classified positive; "
          f"map written to {args.out}/scene_map.pgm")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    variants = models.VARIANTS if args.model == "all" else (args.model,)
    worst_overall = 0.0
    ok = True
    for variant in variants:
        params = models.init_model(variant, seed=args.seed)
        report = model_gradcheck(params, seed=args.seed,
                                 samples_per_tensor=args.samples,
                                 dropout_rate=args.dropout,
                                 flip_sign=args.flip_grad_sign)
        status = "ok" if report.ok else "FAIL"
        print(f"{variant}: max relative error {report.max_rel_error:.3e} "
              f"({report.skipped} kink coordinates skipped) [{status}]")
        for name, coord in sorted(report.worst.items()):
            print(f"  {name}{list(coord.index)}: analytic {coord.analytic:.6e} "
                  f"numeric {coord.numeric:.6e} rel {coord.rel_error:.3e}")
        for failure in report.failures:
            print(f"  non-finite: {failure}")
        worst_overall = max(worst_overall, report.max_rel_error)
        ok = ok and report.ok
    if not ok:
        raise NumericError(
            f"gradient check failed: worst relative error {worst_overall:.3e}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="solarfb",
                     description="solar power plant patch classification and "
                                 "weakly-supervised detection")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--pos", type=int, required=True)
    p.add_argument("--neg", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None)
    p.add_argument("--model", choices=models.VARIANTS, required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--pos-per-batch", type=int, default=8)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--eval-every", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-classify", help="confusion/IoU metrics on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sweep", action="store_true",
                   help="pick the IoU-optimal threshold and dump the sweep table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_classify)

    p = sub.add_parser("eval-detect",
                       help="ROC/AUC of activation maps on the common-TP set")
    p.add_argument("--data", required=True)
    p.add_argument("--entry", action="append", required=True,
                   metavar="NAME=CKPT:METHOD[:THRESHOLD]",
                   help=f"model entry; method one of {METHODS}")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--linking-size", type=int, default=15)
    p.add_argument("--mpcnn-iters", type=int, default=50)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dump-maps", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_detect)

    p = sub.add_parser("detect", help="tile a scene and stitch activation maps")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=METHODS, default="mpcnn-cam")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--linking-size", type=int, default=15)
    p.add_argument("--mpcnn-iters", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--model", choices=models.VARIANTS + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--flip-grad-sign", action="store_true",
                   help=argparse.SUPPRESS)  # self-test hook
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
