"""Training objectives: partial cross-entropy, masked CRF and attentive similarity.

Both pairwise regularizers sum, over ordered pixel pairs ``(p, q)`` with both
ends valid and ``0 < |q - p|_inf < r``, a pair weight times the disagreement
``1 - <P_p, P_q>`` (equal to ``sum_{i != j} P_p^i P_q^j`` on the simplex).
The CRF term walks the window one offset at a time over the full-resolution
grid; the attention term gathers explicit pair index lists on the coarse grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, ops

UNKNOWN = 255


class EmptyRegionWarning(UserWarning):
    """A loss was asked to average over an empty pixel set and returned 0."""


@dataclass
class ScribbleMask:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError(f"scribble labels must be 2-D, got {self.labels.shape}")

    @property
    def labeled(self):
        return self.labels != UNKNOWN

    @property
    def unlabeled(self):
        return self.labels == UNKNOWN


@dataclass
class GateMask:
    valid: np.ndarray

    @classmethod
    def from_scribbles(cls, scribbles, invalid=None):
        """Unlabeled pixels, minus any explicitly ``invalid`` ones."""
        valid = scribbles.unlabeled.copy()
        if invalid is not None:
            valid &= ~np.asarray(invalid, dtype=bool)
        return cls(valid)


@dataclass(frozen=True)
class GaussianKernel:
    weight: float = 1.0
    sigma: float = 0.1
    features: tuple = (0, 1, 2)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("kernel bandwidth must be positive")
        if self.weight < 0:
            raise ValueError("kernel weight must be nonnegative")


@dataclass(frozen=True)
class KernelSpec:
    """Weighted Gaussian kernels over pixel features ``[intensity, x, y]``.

    Feature indices select which of the three normalized features a kernel
    sees; the default is a single joint intensity-location kernel.
    """

    kernels: tuple = (GaussianKernel(),)


@dataclass(frozen=True)
class WindowSpec:
    radius: int = 5

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("window radius must be >= 1")


@dataclass(frozen=True)
class LossWeights:
    lambda_mcrf: float = 0.1
    lambda_atn: float = 0.1

    def __post_init__(self):
        if self.lambda_mcrf < 0 or self.lambda_atn < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossSpecs:
    kernel: KernelSpec = field(default_factory=KernelSpec)
    crf_window: WindowSpec = field(default_factory=WindowSpec)
    atn_window: WindowSpec = field(default_factory=WindowSpec)


# ------------------------------------------------------------------- helpers

def window_pairs(valid, radius):
    """Flat indices ``(p, q)`` of ordered valid pairs with ``0 < |q-p|_inf < radius``."""
    valid = np.asarray(valid, dtype=bool)
    h, w = valid.shape
    flat = np.arange(h * w).reshape(h, w)
    ps, qs = [], []
    reach = radius - 1
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            if dy == 0 and dx == 0:
                continue
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            if y0 >= y1 or x0 >= x1:
                continue
            both = valid[y0:y1, x0:x1] & valid[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            ps.append(flat[y0:y1, x0:x1][both])
            qs.append(flat[y0 + dy:y1 + dy, x0 + dx:x1 + dx][both])
    if not ps:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ps), np.concatenate(qs)


def pixel_features(image):
    """(HW, 3) rows ``[I, x, y]`` with coordinates scaled to [0, 1] per axis."""
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    img = img.reshape(img.shape[-2:])
    h, w = img.shape
    ys, xs = np.divmod(np.arange(h * w), w)
    return np.stack([img.ravel(), xs / max(w - 1, 1), ys / max(h - 1, 1)], axis=1)


def _kernel_values(fp, fq, spec):
    out = np.zeros(fp.shape[:-1])
    for k in spec.kernels:
        idx = list(k.features)
        diff = fp[..., idx] - fq[..., idx]
        out = out + k.weight * np.exp(-(diff * diff).sum(axis=-1) / (2.0 * k.sigma ** 2))
    return out


def gaussian_kernel_similarity(features_p, features_q, spec=KernelSpec()):
    """Weighted Gaussian similarity of two feature vectors."""
    fp = np.asarray(features_p, dtype=np.float64)
    fq = np.asarray(features_q, dtype=np.float64)
    return float(_kernel_values(fp, fq, spec))


def _pair_disagreement(probs_flat, p, q):
    # 1 - <P_p, P_q> for every pair; probs_flat is (C, N)
    agree = ops.sum(ops.mul(probs_flat[:, p], probs_flat[:, q]), axis=0)
    return ops.sub(1.0, agree)


def _single(pred, name):
    if pred.probs.ndim != 3:
        raise ShapeError(name, f"expected a single-image prediction (C, H, W), got {pred.probs.shape}")
    return pred.probs


# -------------------------------------------------------------------- losses

def pce_loss(pred, scribbles):
    """Mean negative log-probability of the scribbled class over labeled pixels.

    Reads ``pred.log_probs`` when present, else takes the log of ``pred.probs``.
    Returns an exact constant 0 when nothing is labeled.
    """
    probs = _single(pred, "pce_loss")
    labels = scribbles.labels
    if labels.shape != probs.shape[1:]:
        raise ShapeError("pce_loss", f"scribbles {labels.shape} vs prediction {probs.shape[1:]}")
    ys, xs = np.nonzero(labels != UNKNOWN)
    cls = labels[ys, xs]
    if cls.size and cls.max() >= probs.shape[0]:
        raise ValueError(f"scribble label {cls.max()} >= num_classes {probs.shape[0]}")
    if cls.size == 0:
        return Tensor(0.0)
    if pred.log_probs is not None:
        picked = pred.log_probs[cls, ys, xs]
    else:
        picked = ops.log(probs[cls, ys, xs])
    return ops.mul(ops.sum(picked), -1.0 / cls.size)


def window_offsets(radius):
    reach = radius - 1
    return [
        (dy, dx)
        for dy in range(-reach, reach + 1)
        for dx in range(-reach, reach + 1)
        if dy or dx
    ]


def crf_pair_weights(image, valid, spec, offsets):
    """(len(offsets), H, W) kernel weights, zero unless both ends are valid."""
    feats = pixel_features(image)
    h, w = valid.shape
    feats = feats.reshape(h, w, 3)
    out = np.zeros((len(offsets), h, w))
    for k, (dy, dx) in enumerate(offsets):
        y0, y1, x0, x1 = ops.offset_bounds(h, w, dy, dx)
        if y0 >= y1 or x0 >= x1:
            continue
        both = valid[y0:y1, x0:x1] & valid[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        s = _kernel_values(feats[y0:y1, x0:x1], feats[y0 + dy:y1 + dy, x0 + dx:x1 + dx], spec)
        out[k, y0:y1, x0:x1] = np.where(both, s, 0.0)
    return out


def masked_crf_loss(pred, image, gate, spec=KernelSpec(), window=WindowSpec()):
    """Windowed CRF relaxation averaged over the gated unlabeled set.

    The kernel values depend only on the image and pixel positions and are
    treated as constants; gradient flows through the prediction only.
    """
    probs = _single(pred, "masked_crf_loss")
    c, h, w = probs.shape
    valid = np.asarray(gate.valid, dtype=bool)
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if valid.shape != (h, w) or img.shape[-2:] != (h, w):
        raise ShapeError("masked_crf_loss", f"gate {valid.shape} / image {img.shape} vs prediction {(h, w)}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("masked_crf_loss: no valid pixels, returning 0", EmptyRegionWarning, stacklevel=2)
        return Tensor(0.0)
    offsets = window_offsets(window.radius)
    if not offsets:
        return ops.mul(ops.sum(probs), 0.0)
    weights = crf_pair_weights(img, valid, spec, offsets)
    disagree = ops.sub(1.0, ops.shifted_agreement(probs, offsets))
    total = ops.sum(ops.mul(disagree, weights))
    return ops.mul(total, 1.0 / n_valid)


def coarse_valid(valid, grid):
    """Project a full-resolution validity map to ``grid``: a cell is valid iff
    every full-resolution pixel it covers is valid."""
    valid = np.asarray(valid, dtype=bool)
    h, w = grid
    H, W = valid.shape
    if H % h or W % w:
        raise ShapeError("coarse_valid", f"grid {grid} does not tile {valid.shape}")
    fy, fx = H // h, W // w
    return valid.reshape(h, fy, w, fx).all(axis=(1, 3))


def attentive_similarity_loss(pred, S, M, scribbles, window=WindowSpec(), grid=None, gate=None):
    """Attention-weighted pairwise disagreement on the attended grid.

    ``pred`` is down-sampled bilinearly to ``grid``; the unlabeled set (or
    ``gate.valid`` when given) is projected with :func:`coarse_valid`.
    Gradient reaches both the prediction and the affinity ``S``.
    """
    probs = _single(pred, "attentive_similarity_loss")
    c, H, W = probs.shape
    if grid is None:
        grid = pred.grid
    h, w = grid
    M = np.asarray(M.data if isinstance(M, Tensor) else M)
    if S.shape != (h * w, h * w) or M.shape != (h * w, h * w):
        raise ShapeError(
            "attentive_similarity_loss", f"S {S.shape} and M {M.shape} must both be {(h * w, h * w)}"
        )
    valid = gate.valid if gate is not None else scribbles.unlabeled
    if np.asarray(valid).shape != (H, W):
        raise ShapeError("attentive_similarity_loss", f"mask {np.shape(valid)} vs prediction {(H, W)}")
    cvalid = coarse_valid(valid, grid)
    n_valid = int(cvalid.sum())
    if n_valid == 0:
        warnings.warn("attentive_similarity_loss: no valid cells, returning 0", EmptyRegionWarning, stacklevel=2)
        return Tensor(0.0)
    small = ops.bilinear_interpolate(probs, h, w)
    p, q = window_pairs(cvalid, window.radius)
    if p.size == 0:
        return ops.add(ops.mul(ops.sum(small), 0.0), ops.mul(ops.sum(S), 0.0))
    flat = ops.reshape(small, (c, h * w))
    weight = ops.mul(S[p, q], M[p, q])
    total = ops.sum(ops.mul(_pair_disagreement(flat, p, q), weight))
    return ops.mul(total, 1.0 / n_valid)


def loss_components(pred, image, scribbles, gate, S, M, weights, specs=LossSpecs()):
    """Dict of ``seg``, ``mcrf``, ``atn`` and weighted ``total``.

    A regularizer with zero weight (or, for ``atn``, no affinity) is not
    evaluated and reports 0.
    """
    seg = pce_loss(pred, scribbles)
    zero = Tensor(0.0)
    mcrf = masked_crf_loss(pred, image, gate, specs.kernel, specs.crf_window) if weights.lambda_mcrf > 0 else zero
    if weights.lambda_atn > 0 and S is not None:
        atn = attentive_similarity_loss(pred, S, M, scribbles, specs.atn_window, gate=gate)
    else:
        atn = zero
    total = seg
    if weights.lambda_mcrf > 0:
        total = ops.add(total, ops.mul(mcrf, weights.lambda_mcrf))
    if weights.lambda_atn > 0 and S is not None:
        total = ops.add(total, ops.mul(atn, weights.lambda_atn))
    return {"seg": seg, "mcrf": mcrf, "atn": atn, "total": total}


def total_loss(pred, image, scribbles, gate, S, M, weights, specs=LossSpecs()):
    """``seg + lambda_mcrf * mcrf + lambda_atn * atn``."""
    return loss_components(pred, image, scribbles, gate, S, M, weights, specs)["total"]
