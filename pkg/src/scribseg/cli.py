"""Command line entry point: ``scribseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .harness.ablate import AblationPlan, run_ablation, run_lambda_sweep
from .harness.data import SyntheticSpec, generate_dataset, load_dataset, save_dataset
from .harness.kvfile import read_kv, write_kv
from .harness.overlay import save_overlay
from .harness.train import TrainConfig, evaluate, model_from_checkpoint, predict_proba, segment, train
from .pnm import read_pgm, write_pgm
from .scribblesim import ScribbleSimConfig, simulate_scribbles

# keys a training config may carry besides TrainConfig fields
DATA_KEYS = {"data": "", "train_images": "200", "data_seed": "1000"}


def _training_inputs(path):
    kv = read_kv(path)
    data = {k: kv.pop(k, v) for k, v in DATA_KEYS.items()}
    config = TrainConfig.from_dict(kv, strict=True)
    if data["data"]:
        dataset = load_dataset(data["data"])
    else:
        spec = SyntheticSpec(num_images=int(data["train_images"]), seed=int(data["data_seed"]),
                             num_classes=config.num_classes)
        dataset = generate_dataset(spec)
    return config, dataset, data


def cmd_train(args):
    config, dataset, data = _training_inputs(args.config)
    os.makedirs(args.out, exist_ok=True)
    result = train(config, dataset, dump_dir=args.out)
    result.save(os.path.join(args.out, "model.ckpt"))
    result.write_log(os.path.join(args.out, "train.log"))
    write_kv(os.path.join(args.out, "config.txt"), dict(config.to_dict(), **data))
    last = result.log[-1]
    print(f"trained {config.preset}: {len(result.log)} steps, final total={last['total']:.6f}")
    return 0


def cmd_eval(args):
    config, params, module = model_from_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(params, config, dataset, module=module)
    report.write(args.report)
    if args.overlays:
        os.makedirs(args.overlays, exist_ok=True)
        by_case = {}
        for s in dataset:
            by_case.setdefault(s.case_id, []).append(s)
        for case_id, items in by_case.items():
            pred = segment(predict_proba(params, config, [s.image for s in items], module))
            for s, p in zip(items, pred):
                save_overlay(os.path.join(args.overlays, f"{case_id}_slice{s.slice_index:02d}.png"), s.image, p, s.mask)
    hd = report.median_hd95()
    print(f"median dice={report.median_dice():.4f} median hd95_mm={'undefined' if hd is None else f'{hd:.3f}'}")
    return 0


def cmd_gen_data(args):
    spec = SyntheticSpec.from_dict(read_kv(args.spec)) if args.spec else SyntheticSpec()
    samples = generate_dataset(spec)
    save_dataset(samples, args.out, spec.num_classes)
    write_kv(os.path.join(args.out, "spec.txt"), spec.to_dict())
    print(f"wrote {len(samples)} slices to {args.out}")
    return 0


def cmd_scribblesim(args):
    mask, _ = read_pgm(args.input)
    scr = simulate_scribbles(mask.astype(np.int64), ScribbleSimConfig(args.hull_expand, args.seed), args.num_classes)
    write_pgm(args.output, scr.labels.astype(np.uint8), 255)
    return 0


def cmd_ablate(args):
    overrides = {}
    if args.config:
        kv = read_kv(args.config)
        parsed = TrainConfig.from_dict(kv, strict=True)
        overrides = {k: getattr(parsed, k) for k in kv if k not in ("preset", "seed")}
    plan = AblationPlan(args.seeds, args.train_images, args.eval_images, overrides)
    if args.lambda_sweep:
        values = [float(v) for v in args.lambda_sweep.split(",")]
        text = run_lambda_sweep(plan, values, args.out)
    else:
        run_ablation(plan, args.out)
        with open(os.path.join(args.out, "summary.txt")) as fh:
            text = fh.read()
    sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="scribseg", description="Scribble-supervised segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--overlays", help="directory for contour overlay PNGs")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--spec", help="key=value dataset spec (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("scribblesim", help="simulate scribbles for one dense mask")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--hull-expand", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-classes", type=int, default=None)
    s.set_defaults(func=cmd_scribblesim)

    a = sub.add_parser("ablate", help="pce_only / pce_mcrf / full over several seeds")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="key=value overrides applied to every preset")
    a.add_argument("--train-images", type=int, default=200)
    a.add_argument("--eval-images", type=int, default=50)
    a.add_argument("--lambda-sweep", help="comma-separated values; trains the full preset with both weights set to each")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
