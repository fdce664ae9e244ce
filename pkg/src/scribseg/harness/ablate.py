"""Three-preset ablation over several seeds, with resumable per-run outputs.

Layout under ``out``::

    seed<k>/<preset>.ckpt      trained parameters
    seed<k>/<preset>.log       per-step loss log
    seed<k>/<preset>.report    metrics report lines
    seed<k>/<preset>.run       key=value run record (config, medians, seconds)
    seed<k>/<preset>_overlay_<case>_sliceNN.png
    summary.txt                per-seed medians and ordering verdicts
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from ..metrics import volume_diagonal
from .data import SyntheticSpec, generate_dataset, group_cases
from .kvfile import format_kv, read_kv, write_kv
from .overlay import save_overlay
from .train import PRESETS, TrainConfig, evaluate, predict_proba, segment, train

log = logging.getLogger(__name__)

TRAIN_SEED_BASE = 1000
EVAL_SEED_BASE = 2000


@dataclass
class AblationPlan:
    seeds: int = 5
    train_images: int = 200
    eval_images: int = 50
    overrides: dict = None  # TrainConfig fields applied to every preset
    overlays: int = 1  # eval cases rendered per run

    def config(self, preset, seed):
        return TrainConfig(preset=preset, seed=seed, **(self.overrides or {}))

    def datasets(self, seed):
        train_set = generate_dataset(SyntheticSpec(num_images=self.train_images, seed=TRAIN_SEED_BASE + seed))
        eval_set = generate_dataset(SyntheticSpec(num_images=self.eval_images, seed=EVAL_SEED_BASE + seed))
        return train_set, eval_set


def hd_penalty(dataset):
    """Undefined distances (an organ missed entirely, or hallucinated) count as
    the volume diagonal so they cannot improve a median."""
    case = next(iter(group_cases(dataset).values()))
    shape = (len(case),) + case[0].mask.shape
    return volume_diagonal(shape, case[0].meta)


def _run_record(config, report, penalty, seconds, train_images, eval_images):
    rec = {f"cfg.{k}": v for k, v in config.to_dict().items()}
    rec.update(
        train_images=train_images,
        eval_images=eval_images,
        median_dice=repr(report.median_dice()),
        median_hd95_mm=repr(report.median_hd95(penalty)),
        hd95_penalty_mm=repr(penalty),
        undefined=report.undefined_count(),
        seconds=f"{seconds:.1f}",
    )
    return rec


def _matches(path, config, plan):
    if not os.path.isfile(path):
        return False
    rec = read_kv(path)
    want = {f"cfg.{k}": str(v) for k, v in config.to_dict().items()}
    want.update(train_images=str(plan.train_images), eval_images=str(plan.eval_images))
    return all(rec.get(k) == v for k, v in want.items())


def run_one(plan, preset, seed, out_dir, train_set, eval_set):
    """Train and evaluate one (preset, seed); reuse a finished run with an identical config."""
    config = plan.config(preset, seed)
    stem = os.path.join(out_dir, f"seed{seed}", preset)
    os.makedirs(os.path.dirname(stem), exist_ok=True)
    if _matches(stem + ".run", config, plan):
        log.info("seed %d %s: reusing finished run", seed, preset)
        return read_kv(stem + ".run")
    t0 = time.perf_counter()
    result = train(config, train_set)
    seconds = time.perf_counter() - t0
    result.save(stem + ".ckpt")
    result.write_log(stem + ".log")
    report = evaluate(result.params, config, eval_set)
    report.write(stem + ".report")
    penalty = hd_penalty(eval_set)
    for case_id, items in list(group_cases(eval_set).items())[: plan.overlays]:
        probs = predict_proba(result.params, config, [s.image for s in items])
        pred = segment(probs)
        for s, p in zip(items, pred):
            save_overlay(f"{stem}_overlay_{case_id}_slice{s.slice_index:02d}.png", s.image, p, s.mask)
    rec = _run_record(config, report, penalty, seconds, plan.train_images, plan.eval_images)
    write_kv(stem + ".run", rec)
    log.info("seed %d %s: dice %s hd95 %s (%.0fs)", seed, preset, rec["median_dice"], rec["median_hd95_mm"], seconds)
    return read_kv(stem + ".run")


def verdicts(table):
    """Ordering checks over ``table[preset] = [(dice, hd95), ...]`` (one entry per seed).

    Dice and HD95 per preset are the medians across seeds of the per-seed
    medians over eval cases.
    """
    dice = {p: float(np.median([d for d, _ in table[p]])) for p in PRESETS}
    hd = {p: float(np.median([h for _, h in table[p]])) for p in PRESETS}
    seeds_c = sum(f[1] <= m[1] for f, m in zip(table["full"], table["pce_mcrf"]))
    n = len(table["full"])
    return {
        "dice": dice,
        "hd95": hd,
        "a_dice_order": dice["full"] >= dice["pce_mcrf"] >= dice["pce_only"] and dice["full"] - dice["pce_only"] > 0.05,
        "b_hd95_full_lt_pce_only": hd["full"] < hd["pce_only"],
        "c_seeds_full_le_pce_mcrf": seeds_c,
        # at least 3 of every 5 seeds
        "c_pass": seeds_c * 5 >= 3 * n,
    }


def summarize(records):
    """``records[(seed, preset)]`` run records -> (summary text, verdict dict)."""
    seeds = sorted({s for s, _ in records})
    table = {p: [] for p in PRESETS}
    lines = []
    for s in seeds:
        for p in PRESETS:
            r = records[(s, p)]
            d, h = float(r["median_dice"]), float(r["median_hd95_mm"])
            table[p].append((d, h))
            lines.append(
                f"seed={s} preset={p} median_dice={d!r} median_hd95_mm={h!r} "
                f"undefined={r['undefined']} seconds={r['seconds']}"
            )
    v = verdicts(table)
    for p in PRESETS:
        lines.append(f"preset={p} seed_median_dice={v['dice'][p]!r} seed_median_hd95_mm={v['hd95'][p]!r}")
    lines.append(f"verdict.a_dice_order={'PASS' if v['a_dice_order'] else 'FAIL'}")
    lines.append(f"verdict.b_hd95_full_lt_pce_only={'PASS' if v['b_hd95_full_lt_pce_only'] else 'FAIL'}")
    lines.append(
        f"verdict.c_full_le_pce_mcrf_seeds={v['c_seeds_full_le_pce_mcrf']}/{len(seeds)} "
        f"{'PASS' if v['c_pass'] else 'FAIL'}"
    )
    return "\n".join(lines) + "\n", v


def run_ablation(plan, out_dir, presets=PRESETS):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "plan.txt"), "w") as fh:
        fh.write(format_kv(dict(seeds=plan.seeds, train_images=plan.train_images, eval_images=plan.eval_images,
                                **{f"override.{k}": v for k, v in (plan.overrides or {}).items()})))
    records = {}
    for seed in range(plan.seeds):
        train_set, eval_set = plan.datasets(seed)
        for preset in presets:
            records[(seed, preset)] = run_one(plan, preset, seed, out_dir, train_set, eval_set)
    if set(presets) != set(PRESETS):
        return records, None
    text, v = summarize(records)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write(text)
    return records, v


def run_lambda_sweep(plan, values, out_dir):
    """Full preset with ``lambda_mcrf = lambda_atn = v`` for each ``v``; returns the table text."""
    lines = []
    for v in values:
        sub = AblationPlan(plan.seeds, plan.train_images, plan.eval_images,
                           dict(plan.overrides or {}, lambda_mcrf=v, lambda_atn=v), plan.overlays)
        rows = []
        for seed in range(sub.seeds):
            train_set, eval_set = sub.datasets(seed)
            rows.append(run_one(sub, "full", seed, os.path.join(out_dir, f"lambda{v:g}"), train_set, eval_set))
        dice = float(np.median([float(r["median_dice"]) for r in rows]))
        hd = float(np.median([float(r["median_hd95_mm"]) for r in rows]))
        lines.append(f"lambda={v!r} seed_median_dice={dice!r} seed_median_hd95_mm={hd!r}")
    text = "\n".join(lines) + "\n"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "sweep.txt"), "w") as fh:
        fh.write(text)
    return text
