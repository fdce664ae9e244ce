"""Spatial self-attention over a flattened feature map and its affinity transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, ops


@dataclass
class AttentionConfig:
    feature_dim: int = 64
    n_heads: int = 2
    n_layers: int = 1
    d_q: int = 8
    d_v: int = 8
    # Add the host features back onto the compressed output. With the
    # compression zeroed the module is then an exact identity.
    residual: bool = True
    # scale of the output compression at init; 0 starts the module as an exact identity
    out_scale: float = 0.1

    def __post_init__(self):
        if self.n_heads < 1 or self.n_layers < 1:
            raise ValueError("n_heads and n_layers must be >= 1")
        if min(self.feature_dim, self.d_q, self.d_v) < 1:
            raise ValueError("feature_dim, d_q and d_v must be >= 1")

    @property
    def d_k(self):
        return self.d_q

    @property
    def channels(self):
        return self.n_heads * self.n_layers

    def to_dict(self):
        return {
            "attn_feature_dim": self.feature_dim,
            "attn_heads": self.n_heads,
            "attn_layers": self.n_layers,
            "attn_dq": self.d_q,
            "attn_dv": self.d_v,
            "attn_residual": int(self.residual),
            "attn_out_scale": self.out_scale,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            feature_dim=int(d["attn_feature_dim"]),
            n_heads=int(d["attn_heads"]),
            n_layers=int(d["attn_layers"]),
            d_q=int(d["attn_dq"]),
            d_v=int(d["attn_dv"]),
            residual=bool(int(d.get("attn_residual", 1))),
            out_scale=float(d.get("attn_out_scale", 0.1)),
        )


def _linear_init(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_attention_params(config, rng, prefix="attn."):
    rng = np.random.default_rng(rng)
    width = config.n_heads * config.d_v
    p = {}
    for layer in range(config.n_layers):
        d_in = config.feature_dim if layer == 0 else width
        for head in range(config.n_heads):
            key = f"{prefix}l{layer}.h{head}."
            p[key + "q.w"] = _linear_init(rng, d_in, config.d_q)
            p[key + "q.b"] = np.zeros(config.d_q)
            p[key + "k.w"] = _linear_init(rng, d_in, config.d_k)
            p[key + "k.b"] = np.zeros(config.d_k)
            p[key + "v.w"] = _linear_init(rng, d_in, config.d_v)
            p[key + "v.b"] = np.zeros(config.d_v)
        key = f"{prefix}l{layer}."
        p[key + "ln.g"] = np.ones(width)
        p[key + "ln.b"] = np.zeros(width)
        p[key + "mlp1.w"] = _linear_init(rng, width, width)
        p[key + "mlp1.b"] = np.zeros(width)
        p[key + "mlp2.w"] = _linear_init(rng, width, width)
        p[key + "mlp2.b"] = np.zeros(width)
    # Compression starts small so the residual path dominates early training.
    p[prefix + "out.w"] = config.out_scale * _linear_init(rng, width, config.feature_dim)
    p[prefix + "out.b"] = np.zeros(config.feature_dim)
    p[prefix + "affinity.w"] = rng.normal(0.0, 0.1, size=config.channels)
    p[prefix + "affinity.b"] = np.zeros(())
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def _linear(x, params, key):
    return ops.add(ops.matmul(x, params[key + ".w"]), params[key + ".b"])


def ssa_forward(f, config, params, prefix="attn."):
    """Multi-head, multi-layer self-attention on ``f`` of shape (hw, d).

    Returns ``(attended, raw)`` where ``attended`` has the shape of ``f`` and
    ``raw`` is the (hw, hw, n_heads * n_layers) stack of pre-softmax scores.
    """
    if f.ndim != 2 or f.shape[1] != config.feature_dim:
        raise ShapeError("ssa_forward", f"expected (hw, {config.feature_dim}) features, got {f.shape}", axes=(1,))
    first = params[f"{prefix}l0.h0.q.w"]
    if first.shape[0] != config.feature_dim:
        raise ShapeError("ssa_forward", f"query weight expects d={first.shape[0]}, config has {config.feature_dim}")

    hw = f.shape[0]
    scale = 1.0 / np.sqrt(config.d_k)
    x = f
    scores = []
    for layer in range(config.n_layers):
        heads = []
        for head in range(config.n_heads):
            key = f"{prefix}l{layer}.h{head}."
            q = _linear(x, params, key + "q")
            k = _linear(x, params, key + "k")
            v = _linear(x, params, key + "v")
            a_i = ops.mul(ops.matmul(q, ops.transpose(k)), scale)
            scores.append(ops.reshape(a_i, (hw, hw, 1)))
            heads.append(ops.matmul(ops.softmax(a_i, axis=1), v))
        a = ops.concat(heads, axis=1) if len(heads) > 1 else heads[0]
        key = f"{prefix}l{layer}."
        normed = ops.add(ops.mul(ops.layer_norm(a, axis=1), params[key + "ln.g"]), params[key + "ln.b"])
        hidden = ops.relu(_linear(normed, params, key + "mlp1"))
        x = ops.add(a, _linear(hidden, params, key + "mlp2"))

    out = _linear(x, params, prefix + "out")
    if config.residual:
        out = ops.add(f, out)
    raw = ops.concat(scores, axis=2) if len(scores) > 1 else scores[0]
    return out, raw


class SelfAttentionModule:
    """Binds an :class:`AttentionConfig` to its parameters for the backbone."""

    def __init__(self, config, params, prefix="attn."):
        self.config = config
        self.params = params
        self.prefix = prefix

    def forward(self, f):
        return ssa_forward(f, self.config, self.params, self.prefix)


def attention_to_affinity(raw, params, prefix="attn."):
    """Row-softmax, symmetrize, compress channels, sigmoid: (hw, hw, c) -> (hw, hw).

    The channel compression is written as a per-entry weighted sum so that
    entries (p, q) and (q, p) go through identical arithmetic.
    """
    w = params[prefix + "affinity.w"]
    b = params[prefix + "affinity.b"]
    if raw.ndim != 3 or raw.shape[0] != raw.shape[1]:
        raise ShapeError("attention_to_affinity", f"raw scores must be (hw, hw, c), got {raw.shape}")
    if raw.shape[2] != w.shape[0]:
        raise ShapeError(
            "attention_to_affinity", f"{raw.shape[2]} channels but compression expects {w.shape[0]}", axes=(2,)
        )
    z = ops.add(ops.sum(ops.mul(symmetrized_attention(raw), w), axis=2), b)
    return ops.sigmoid(z)


def symmetrized_attention(raw):
    """Row-softmax each channel of (hw, hw, c) scores, then add the transpose."""
    rows = ops.softmax(raw, axis=1)
    return ops.add(rows, ops.transpose(rows, (1, 0, 2)))


def grid_coordinates(h, w):
    """(hw, 2) array of (x, y) for row-major flattened pixels."""
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def distance_decay_map(h, w, sigma):
    """Gaussian falloff ``exp(-|p - q|^2 / 2 sigma^2)`` over a flattened h x w grid."""
    if h < 1 or w < 1:
        raise ValueError("grid must be at least 1x1")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    xy = grid_coordinates(h, w)
    diff = xy[:, None, :] - xy[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    return np.exp(-d2 / (2.0 * sigma * sigma))
