"""Small U-shaped FCN with an optional self-attention graft on one encoder level.

The reference widths (three levels, 16/32/64 channels) are a desk-scale
stand-in; nothing here depends on them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, ops
from .autodiff.serialize import tensor_from_bytes, tensor_to_bytes


class ConfigError(ValueError):
    pass


@dataclass
class FcnConfig:
    in_channels: int = 1
    num_classes: int = 4
    encoder_channels: tuple = (16, 32, 64)
    attention_level: int = 2
    convs_per_level: int = 2

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if not self.encoder_channels:
            raise ConfigError("encoder_channels must not be empty")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (background plus at least one class)")
        if not 0 <= self.attention_level < len(self.encoder_channels):
            raise ConfigError(
                f"attention_level {self.attention_level} outside 0..{len(self.encoder_channels) - 1}"
            )
        if self.convs_per_level < 1:
            raise ConfigError("convs_per_level must be >= 1")

    @property
    def levels(self):
        return len(self.encoder_channels)

    def to_dict(self):
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "encoder_channels": ",".join(str(c) for c in self.encoder_channels),
            "attention_level": self.attention_level,
            "convs_per_level": self.convs_per_level,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            encoder_channels=tuple(int(c) for c in str(d["encoder_channels"]).split(",")),
            attention_level=int(d["attention_level"]),
            convs_per_level=int(d.get("convs_per_level", 2)),
        )


@dataclass
class Prediction:
    """Per-pixel class logits and their softmax over the class axis.

    Single-image predictions are (num_classes, H, W). Batched ones carry a
    leading batch axis; use :meth:`item` to take one image.
    ``attention_raw`` holds one raw score stack (hw, hw, n*L) per image when
    attention ran, and ``grid`` the (h, w) of the attended level.
    """

    logits: Tensor
    probs: Tensor
    attention_raw: list = field(default_factory=list)
    grid: tuple = None
    # log-softmax of the logits, kept for a cross-entropy that cannot hit log(0)
    log_probs: Tensor = None

    @classmethod
    def from_logits(cls, logits, class_axis=0, **kw):
        return cls(
            logits=logits,
            probs=ops.softmax(logits, axis=class_axis),
            log_probs=ops.log_softmax(logits, axis=class_axis),
            **kw,
        )

    @property
    def batched(self):
        return self.probs.ndim == 4

    def item(self, i):
        if not self.batched:
            raise ValueError("prediction is not batched")
        raw = [self.attention_raw[i]] if self.attention_raw else []
        logp = self.log_probs[i] if self.log_probs is not None else None
        return Prediction(self.logits[i], self.probs[i], raw, self.grid, logp)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config, rng):
    """He-initialized parameters keyed by stable dotted names."""
    rng = np.random.default_rng(rng)
    params = {}
    prev = config.in_channels
    for lvl, ch in enumerate(config.encoder_channels):
        for k in range(config.convs_per_level):
            cin = prev if k == 0 else ch
            params[f"enc{lvl}.conv{k}.w"] = _he(rng, (ch, cin, 3, 3), cin * 9)
            params[f"enc{lvl}.conv{k}.b"] = np.zeros(ch)
        prev = ch
    for lvl in reversed(range(config.levels - 1)):
        deep = config.encoder_channels[lvl + 1]
        ch = config.encoder_channels[lvl]
        params[f"dec{lvl}.up.w"] = _he(rng, (deep, ch, 2, 2), deep)
        params[f"dec{lvl}.up.b"] = np.zeros(ch)
        for k in range(config.convs_per_level):
            cin = 2 * ch if k == 0 else ch
            params[f"dec{lvl}.conv{k}.w"] = _he(rng, (ch, cin, 3, 3), cin * 9)
            params[f"dec{lvl}.conv{k}.b"] = np.zeros(ch)
    c0 = config.encoder_channels[0]
    params["head.w"] = _he(rng, (config.num_classes, c0, 1, 1), c0)
    params["head.b"] = np.zeros(config.num_classes)
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def _conv_block(x, params, prefix, n):
    for k in range(n):
        x = ops.relu(ops.conv2d(x, params[f"{prefix}.conv{k}.w"], params[f"{prefix}.conv{k}.b"], pad=1))
    return x


def _attend(features, attention):
    # (N, d, h, w) -> per image (hw, d) through the module -> back to (N, d, h, w)
    n, d, h, w = features.shape
    outs, raws = [], []
    for i in range(n):
        f = ops.reshape(ops.transpose(features[i], (1, 2, 0)), (h * w, d))
        attended, raw = attention.forward(f)
        outs.append(ops.transpose(ops.reshape(attended, (h, w, d)), (2, 0, 1)))
        raws.append(raw)
    return ops.stack(outs, axis=0), raws


def fcn_forward(image, config, params, attention=None):
    """Run the FCN on one image (C_in, H, W) or a batch (N, C_in, H, W).

    With ``attention`` attached, the feature map of
    ``config.attention_level`` is replaced by the module's output, and the
    raw attention scores are returned on the prediction.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    single = x.ndim == 3
    if single:
        x = ops.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ConfigError(f"expected input (N, {config.in_channels}, H, W), got {image.shape}")
    factor = 2 ** (config.levels - 1)
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ConfigError(f"spatial dims {x.shape[2:]} not divisible by {factor}")

    skips = []
    raws, grid = [], None
    for lvl in range(config.levels):
        if lvl > 0:
            x = ops.max_pool2d(x, 2)
        x = _conv_block(x, params, f"enc{lvl}", config.convs_per_level)
        if attention is not None and lvl == config.attention_level:
            x, raws = _attend(x, attention)
            grid = (x.shape[2], x.shape[3])
        skips.append(x)

    for lvl in reversed(range(config.levels - 1)):
        x = ops.transposed_conv2d(x, params[f"dec{lvl}.up.w"], params[f"dec{lvl}.up.b"], stride=2)
        x = ops.concat([x, skips[lvl]], axis=1)
        x = _conv_block(x, params, f"dec{lvl}", config.convs_per_level)

    logits = ops.conv2d(x, params["head.w"], params["head.b"])
    if single:
        logits = ops.reshape(logits, logits.shape[1:])
        return Prediction.from_logits(logits, class_axis=0, attention_raw=raws, grid=grid)
    return Prediction.from_logits(logits, class_axis=1, attention_raw=raws, grid=grid)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SSCK"


def save_checkpoint(path, params, settings):
    """Write parameters plus ``settings`` (flat key/value pairs) to ``path``.

    Layout: ``SSCK``, u32 text length, UTF-8 ``key=value`` lines, u32 tensor
    count, then per tensor a u32 name length, the UTF-8 name and an SSTN
    blob. Names are written in sorted order so identical states give
    identical bytes.
    """
    text = "".join(f"{k}={settings[k]}\n" for k in sorted(settings)).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(params))]
    for name in sorted(params):
        raw = name.encode()
        chunks += [struct.pack("<I", len(raw)), raw, tensor_to_bytes(params[name])]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Return ``(params, settings)``; params are fresh trainable tensors."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (n_text,) = struct.unpack_from("<I", buf, 4)
    text = buf[8:8 + n_text].decode()
    settings = dict(line.split("=", 1) for line in text.splitlines() if line)
    off = 8 + n_text
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + n_name].decode()
        t, off = tensor_from_bytes(buf, off + 4 + n_name)
        params[name] = Tensor(t.data.copy(), requires_grad=True)
    return params, settings
