import math
import os
import re

import numpy as np
import pytest
from PIL import Image

from scribseg.autodiff import Tensor
from scribseg.harness.ablate import AblationPlan, summarize, verdicts
from scribseg.harness.augment import augment, rotate, rotation_margin
from scribseg.harness.data import SyntheticSpec, generate_dataset, labeled_fraction, load_dataset, save_dataset
from scribseg.harness.kvfile import format_kv, parse_kv
from scribseg.harness.overlay import overlay_rgb, save_overlay
from scribseg.harness.train import (
    TrainConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    poly_lr,
    train,
)
from scribseg.losses import UNKNOWN
from scribseg.metrics import evaluate_volume

TINY = dict(encoder_channels=(4, 8, 8), attn_dq=4, attn_dv=4, batch_size=4, epochs=1)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(SyntheticSpec(num_images=10, seed=5))


# -------------------------------------------------------------------- data

def test_dataset_is_deterministic_and_normalized():
    a = generate_dataset(SyntheticSpec(num_images=20, seed=9))
    b = generate_dataset(SyntheticSpec(num_images=20, seed=9))
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
        assert x.scribbles.labels.tobytes() == y.scribbles.labels.tobytes()
    for case in range(4):
        vol = np.stack([s.image for s in a if s.case_id == f"case{case:03d}"])
        assert vol.min() == 0.0 and vol.max() == 1.0
    assert labeled_fraction(a) < 0.10


def test_degenerate_spec_rejected():
    with pytest.raises(ValueError):
        SyntheticSpec(num_images=7, slices_per_case=5)
    with pytest.raises(ValueError):
        SyntheticSpec(axis_range=(5, 40))


def test_dataset_disk_roundtrip(tmp_path, small_data):
    save_dataset(small_data, tmp_path, 4)
    back = load_dataset(tmp_path)
    assert len(back) == len(small_data)
    for x, y in zip(small_data, back):
        assert np.abs(x.image - y.image).max() <= 0.5 / 65535 + 1e-12
        assert np.array_equal(x.mask, y.mask)
        assert np.array_equal(x.scribbles.labels, y.scribbles.labels)
    head = (tmp_path / "case000" / "slice00_image.pgm").read_bytes()[:16]
    assert head.startswith(b"P5\n64 64\n65535\n")
    assert parse_kv((tmp_path / "case000" / "meta.txt").read_text())["thickness_z"] == "9.0"


def test_kv_roundtrip_and_comments():
    d = {"a": "1", "b": "x,y"}
    assert parse_kv(format_kv(d) + "# note\n\n") == d
    with pytest.raises(ValueError):
        parse_kv("novalue\n")


# ---------------------------------------------------------------- augment

def test_augment_identity(rng):
    img = rng.random((16, 16))
    lab = rng.integers(0, 4, (16, 16))
    out, olab, rec = augment(img, lab, rng, max_angle=0.0, flip=False)
    assert np.array_equal(out, img) and np.array_equal(olab, lab)
    assert not rec.margin.any()


def test_ninety_degree_rotation_has_no_margin(rng):
    img = rng.random((64, 64))
    out, _, margin = rotate(img, np.zeros((64, 64), int), 90.0)
    assert not margin.any()
    # positive angles turn clockwise on screen (rows grow downward)
    np.testing.assert_allclose(out, np.rot90(img, -1), atol=1e-9)


def test_seventeen_degree_margin_matches_geometry():
    n = 64
    t = math.radians(17.0)
    expected = np.zeros((n, n), bool)
    c = (n - 1) / 2
    for y in range(n):
        for x in range(n):
            # rotate the output point back into the source frame
            u = math.cos(t) * (x - c) + math.sin(t) * (y - c) + c
            v = -math.sin(t) * (x - c) + math.cos(t) * (y - c) + c
            expected[y, x] = not (0 <= u <= n - 1 and 0 <= v <= n - 1)
    margin = rotation_margin((n, n), 17.0)
    assert np.array_equal(margin, expected)
    assert margin.any()
    _, lab, _ = rotate(np.zeros((n, n)), np.zeros((n, n), int), 17.0)
    assert (lab[margin] == UNKNOWN).all() and (lab[~margin] == 0).all()


# ------------------------------------------------------------------ train

def test_zero_learning_rate_leaves_params(small_data):
    cfg = TrainConfig(preset="full", base_lr=0.0, **TINY)
    result = train(cfg, small_data)
    fresh, _, _ = build_model(cfg)
    for k in fresh:
        assert np.array_equal(fresh[k].data, result.params[k].data)


def test_pce_only_logs_seg_as_total(small_data):
    result = train(TrainConfig(preset="pce_only", **TINY), small_data)
    for rec in result.log:
        assert rec["total"] == rec["seg"]
        assert rec["mcrf"] == 0.0 and rec["atn"] == 0.0


def test_full_without_atn_weight_equals_pce_mcrf(small_data):
    a = train(TrainConfig(preset="full", lambda_atn=0.0, **TINY), small_data)
    b = train(TrainConfig(preset="pce_mcrf", **TINY), small_data)
    assert a.log_lines() == b.log_lines()


def test_lr_schedule_closed_form(small_data):
    cfg = TrainConfig(preset="pce_only", base_lr=0.07, lr_power=0.9, **dict(TINY, epochs=2))
    result = train(cfg, small_data)
    total = len(result.log)
    for rec in result.log:
        assert rec["lr"] == 0.07 * (1.0 - rec["step"] / total) ** 0.9
        assert rec["lr"] == poly_lr(0.07, rec["step"], total, 0.9)


def test_full_preset_logs_all_terms(small_data):
    result = train(TrainConfig(preset="full", **TINY), small_data)
    rec = result.log[0]
    assert rec["mcrf"] > 0 and rec["atn"] > 0
    assert abs(rec["total"] - (rec["seg"] + 0.1 * rec["mcrf"] + 0.1 * rec["atn"])) < 1e-12


def test_nan_loss_aborts_with_dump(tmp_path, small_data):
    bad = list(small_data)
    bad[0] = type(bad[0])(np.full((64, 64), np.nan), bad[0].mask, bad[0].scribbles, "x", 0)
    with pytest.raises(TrainingDiverged) as err:
        train(TrainConfig(preset="pce_only", **dict(TINY, batch_size=10)), bad, dump_dir=str(tmp_path))
    assert os.path.isfile(err.value.dump_path)
    assert np.isnan(np.load(err.value.dump_path)["images"]).any()


def test_reproducible_logs_and_checkpoints(tmp_path, small_data):
    cfg = TrainConfig(preset="full", **TINY)
    a = train(cfg, small_data)
    b = train(cfg, small_data)
    assert a.log_lines() == b.log_lines()
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_config_roundtrip():
    cfg = TrainConfig(preset="pce_mcrf", encoder_channels=(8, 16, 32), flip=False, base_lr=0.02)
    assert TrainConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"bogus": "1"}, strict=True)
    with pytest.raises(ValueError):
        TrainConfig(preset="nope")


# --------------------------------------------------------------- evaluate

def test_ground_truth_scores_perfectly(small_data):
    gt = np.stack([s.mask for s in small_data[:5]])
    rep = evaluate_volume(gt, gt, small_data[0].meta, [c for c in np.unique(gt) if c > 0])
    assert all(r["dice"] == 1.0 and r["hd95"] == 0.0 for r in rep.records)


def test_evaluate_is_deterministic(small_data):
    cfg = TrainConfig(preset="full", **TINY)
    params, module, _ = build_model(cfg)
    a = evaluate(params, cfg, small_data).to_lines()
    b = evaluate(params, cfg, small_data).to_lines()
    assert a == b
    pattern = re.compile(r"^case=\S+ class=\d+ dice=\S+ hd95_mm=(undefined|\S+)$")
    assert all(pattern.match(line) for line in a)


def test_overlay_image(tmp_path, rng):
    img = rng.random((16, 16))
    pred = np.zeros((16, 16), int)
    pred[4:10, 4:10] = 1
    rgb = overlay_rgb(img, pred, pred, scale=2)
    assert rgb.shape == (32, 32, 3) and rgb.dtype == np.uint8
    path = save_overlay(tmp_path / "o.png", img, pred)
    assert Image.open(path).size == (64, 64)


# ----------------------------------------------------------------- ablate

def test_verdict_rules():
    table = {
        "full": [(0.8, 5.0)] * 3 + [(0.8, 9.0)] * 2,
        "pce_mcrf": [(0.7, 6.0)] * 5,
        "pce_only": [(0.5, 10.0)] * 5,
    }
    v = verdicts(table)
    assert v["a_dice_order"] and v["b_hd95_full_lt_pce_only"]
    assert v["c_seeds_full_le_pce_mcrf"] == 3 and v["c_pass"]
    table["pce_mcrf"] = [(0.85, 6.0)] * 5
    assert not verdicts(table)["a_dice_order"]


def test_summary_text():
    rec = lambda d, h: {"median_dice": repr(d), "median_hd95_mm": repr(h), "undefined": "0", "seconds": "1.0"}
    records = {(0, "pce_only"): rec(0.5, 9.0), (0, "pce_mcrf"): rec(0.6, 8.0), (0, "full"): rec(0.7, 7.0)}
    text, v = summarize(records)
    assert "verdict.a_dice_order=PASS" in text
    assert "seed=0 preset=full median_dice=0.7 median_hd95_mm=7.0" in text


def test_ablation_plan_seeds_differ():
    plan = AblationPlan(seeds=2, train_images=5, eval_images=5)
    a, _ = plan.datasets(0)
    b, _ = plan.datasets(1)
    assert a[0].image.tobytes() != b[0].image.tobytes()
    assert plan.config("full", 1).seed == 1
