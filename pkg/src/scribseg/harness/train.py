"""Training loop and evaluation for the three experiment presets."""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from ..attention import (
    AttentionConfig,
    SelfAttentionModule,
    attention_to_affinity,
    distance_decay_map,
    init_attention_params,
)
from ..autodiff import Tensor, backward, ops
from ..backbone import FcnConfig, fcn_forward, init_params, load_checkpoint, save_checkpoint
from ..losses import (
    GateMask,
    GaussianKernel,
    KernelSpec,
    LossSpecs,
    LossWeights,
    ScribbleMask,
    WindowSpec,
    loss_components,
)
from ..metrics import MetricsReport, evaluate_volume
from .augment import augment
from .data import group_cases

log = logging.getLogger(__name__)

PRESETS = ("pce_only", "pce_mcrf", "full")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, dump_path):
        super().__init__(f"{message}; batch dumped to {dump_path}")
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    """All training knobs; every field is a key in the flat config file.

    Epochs, batch size, momentum and learning rate are desk-scale choices,
    not published settings.
    """

    preset: str = "full"
    epochs: int = 30
    batch_size: int = 8
    base_lr: float = 0.05
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    lambda_mcrf: float = 0.1
    lambda_atn: float = 0.1
    crf_radius: int = 5
    crf_sigma: float = 0.1
    crf_weight: float = 1.0
    atn_radius: int = 5
    atn_sigma: float = 0.0  # 0 selects atn_radius / 2
    num_classes: int = 4
    encoder_channels: tuple = (16, 32, 64)
    attention_level: int = 2
    attn_heads: int = 2
    attn_layers: int = 1
    attn_dq: int = 8
    attn_dv: int = 8
    attn_residual: bool = True
    attn_out_scale: float = 0.1
    attach_attention: int = -1  # -1 follows the preset
    max_rotation: float = 15.0
    flip: bool = True
    exclude_margins: bool = False
    resize: int = 0  # 0 keeps the native resolution
    seed: int = 0
    single_thread: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")

    # preset algebra: which terms are active and whether attention is grafted
    @property
    def weights(self):
        if self.preset == "pce_only":
            return LossWeights(0.0, 0.0)
        if self.preset == "pce_mcrf":
            return LossWeights(self.lambda_mcrf, 0.0)
        return LossWeights(self.lambda_mcrf, self.lambda_atn)

    @property
    def uses_attention(self):
        if self.attach_attention >= 0:
            return bool(self.attach_attention)
        return self.preset != "pce_only"

    @property
    def fcn_config(self):
        return FcnConfig(1, self.num_classes, self.encoder_channels, self.attention_level)

    @property
    def attention_config(self):
        return AttentionConfig(
            feature_dim=self.encoder_channels[self.attention_level],
            n_heads=self.attn_heads,
            n_layers=self.attn_layers,
            d_q=self.attn_dq,
            d_v=self.attn_dv,
            residual=self.attn_residual,
            out_scale=self.attn_out_scale,
        )

    @property
    def loss_specs(self):
        return LossSpecs(
            kernel=KernelSpec((GaussianKernel(self.crf_weight, self.crf_sigma, (0, 1, 2)),)),
            crf_window=WindowSpec(self.crf_radius),
            atn_window=WindowSpec(self.atn_radius),
        )

    @property
    def decay_sigma(self):
        return self.atn_sigma if self.atn_sigma > 0 else self.atn_radius / 2.0

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d, strict=False):
        kw = {}
        names = {f.name: f for f in fields(cls)}
        for key, v in d.items():
            if key not in names:
                if strict:
                    raise KeyError(f"unknown training key {key!r}")
                continue
            default = names[key].default
            if isinstance(default, bool):
                kw[key] = str(v).strip().lower() in ("1", "true", "yes")
            elif isinstance(default, tuple):
                kw[key] = tuple(int(x) for x in str(v).split(","))
            elif isinstance(default, int):
                kw[key] = int(v)
            elif isinstance(default, float):
                kw[key] = float(v)
            else:
                kw[key] = str(v)
        return cls(**kw)


def poly_lr(base_lr, step, total_steps, power):
    return base_lr * (1.0 - step / total_steps) ** power


@dataclass
class TrainResult:
    config: TrainConfig
    params: dict
    log: list = field(default_factory=list)

    def settings(self):
        return self.config.to_dict()

    def save(self, path):
        save_checkpoint(path, self.params, self.settings())

    def log_lines(self):
        keys = ("step", "epoch", "lr", "seg", "mcrf", "atn", "total")
        return [" ".join(f"{k}={rec[k]!r}" for k in keys) for rec in self.log]

    def write_log(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.log_lines()) + "\n")


def build_model(config):
    """Fresh parameters. The backbone and attention draw from separate streams
    so every preset starts from the same backbone weights for one seed."""
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    params = init_params(config.fcn_config, np.random.default_rng(seeds[0]))
    module = None
    if config.uses_attention:
        acfg = config.attention_config
        params.update(init_attention_params(acfg, np.random.default_rng(seeds[1])))
        module = SelfAttentionModule(acfg, params)
    return params, module, np.random.default_rng(seeds[2])


def model_from_checkpoint(path):
    params, settings = load_checkpoint(path)
    config = TrainConfig.from_dict(settings)
    module = SelfAttentionModule(config.attention_config, params) if config.uses_attention else None
    return config, params, module


def batch_losses(pred, images, scribbles, gates, config, decay, params):
    """Per-batch mean of each loss component (tensors)."""
    weights = config.weights
    specs = config.loss_specs
    parts = {"seg": [], "mcrf": [], "atn": [], "total": []}
    for i in range(len(scribbles)):
        item = pred.item(i)
        S = None
        if item.attention_raw and weights.lambda_atn > 0:
            S = attention_to_affinity(item.attention_raw[0], params)
        comps = loss_components(item, images[i], scribbles[i], gates[i], S, decay, weights, specs)
        for k in parts:
            parts[k].append(comps[k])
    n = float(len(scribbles))
    return {k: ops.mul(_sum(v), 1.0 / n) for k, v in parts.items()}


def _sum(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = ops.add(total, t)
    return total


def _dump_batch(images, scribbles, comps, out_dir):
    fd, path = tempfile.mkstemp(prefix="diverged_", suffix=".npz", dir=out_dir)
    os.close(fd)
    np.savez(
        path,
        images=np.stack(images),
        scribbles=np.stack([s.labels for s in scribbles]),
        **{k: np.asarray(v.data) for k, v in comps.items()},
    )
    return path


def _resize_pair(image, labels, size):
    if not size or image.shape[0] == size:
        return image, labels
    img = ops.bilinear_interpolate(Tensor(image), size, size).data
    idx_y = np.minimum((np.arange(size) + 0.5) * labels.shape[0] / size, labels.shape[0] - 1).astype(int)
    idx_x = np.minimum((np.arange(size) + 0.5) * labels.shape[1] / size, labels.shape[1] - 1).astype(int)
    return img, labels[np.ix_(idx_y, idx_x)]


def train(config, dataset, dump_dir=None, callback=None):
    """SGD with momentum and polynomial decay over ``config.epochs``.

    ``dataset`` is a list of objects with ``image`` and ``scribbles``.
    Deterministic for a given seed; with ``single_thread`` the BLAS pool is
    pinned to one thread so the log and parameters are bit-stable.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    limit = 1 if config.single_thread else None
    with threadpool_limits(limits=limit):
        return _train(config, dataset, dump_dir, callback)


def _train(config, dataset, dump_dir, callback):
    params, module, rng = build_model(config)
    n = len(dataset)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    result = TrainResult(config, params)
    decay = None
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            images, scribbles, gates = [], [], []
            for i in idx:
                s = dataset[i]
                img, lab = _resize_pair(s.image, s.scribbles.labels, config.resize)
                img, lab, rec = augment(img, lab, rng, config.max_rotation, config.flip)
                scr = ScribbleMask(lab, config.num_classes)
                images.append(img)
                scribbles.append(scr)
                gates.append(GateMask.from_scribbles(scr, rec.margin if config.exclude_margins else None))
            x = Tensor(np.stack(images)[:, None])
            pred = fcn_forward(x, config.fcn_config, params, module)
            if decay is None and pred.grid is not None:
                decay = distance_decay_map(pred.grid[0], pred.grid[1], config.decay_sigma)
            comps = batch_losses(pred, images, scribbles, gates, config, decay, params)
            values = {k: float(v.data) for k, v in comps.items()}
            if not all(np.isfinite(v) for v in values.values()):
                path = _dump_batch(images, scribbles, comps, dump_dir)
                raise TrainingDiverged(f"non-finite loss at step {step}: {values}", path)
            lr = poly_lr(config.base_lr, step, total_steps, config.lr_power)
            result.log.append(dict(step=step, epoch=epoch, lr=lr, **values))
            if comps["total"].requires_grad:
                backward(comps["total"])
                for k, p in params.items():
                    g = p.grad if p.grad is not None else 0.0
                    if config.weight_decay:
                        g = g + config.weight_decay * p.data
                    velocity[k] = config.momentum * velocity[k] - lr * g
                    params[k] = Tensor(p.data + velocity[k], requires_grad=True)
            if callback is not None:
                callback(result.log[-1])
            step += 1
        log.info("epoch %d: %s", epoch, result.log[-1])
    return result


# --------------------------------------------------------------- inference

def predict_proba(params, config, images, module=None, batch_size=8):
    """Class probabilities (N, C, H, W) for images (N, H, W)."""
    images = np.asarray(images, dtype=np.float64)
    if module is None and config.uses_attention:
        module = SelfAttentionModule(config.attention_config, params)
    native = images.shape[1:]
    if config.resize and native != (config.resize, config.resize):
        images = ops.bilinear_interpolate(Tensor(images), config.resize, config.resize).data
    out = []
    for start in range(0, len(images), batch_size):
        x = Tensor(images[start:start + batch_size, None])
        out.append(fcn_forward(x, config.fcn_config, params, module).probs.data)
    probs = np.concatenate(out)
    if probs.shape[2:] != native:
        probs = ops.bilinear_interpolate(Tensor(probs), *native).data
    return probs


def segment(probs):
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)


def evaluate(params, config, dataset, meta=None, module=None):
    """Stack per-slice predictions into volumes and score every case.

    Classes scored per case are the foreground classes present in either the
    ground truth or the prediction.
    """
    report = MetricsReport()
    for case_id, items in group_cases(dataset).items():
        probs = predict_proba(params, config, [s.image for s in items], module)
        pred = segment(probs)
        gt = np.stack([s.mask for s in items])
        classes = sorted(set(np.unique(gt).tolist()) | set(np.unique(pred).tolist()) - {0})
        classes = [c for c in classes if c != 0]
        evaluate_volume(pred, gt, meta or items[0].meta, classes, case_id, report)
    return report
