"""Rotation / flip augmentation that records the extrapolated margin."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..losses import UNKNOWN

EDGE_TOL = 1e-9


@dataclass
class AugmentRecord:
    angle: float
    flip_h: bool
    flip_v: bool
    margin: np.ndarray


def inverse_coordinates(shape, angle_deg):
    """Source (y, x) sampled by each output pixel under a rotation about the centre."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy
    return src_y, src_x


def rotation_margin(shape, angle_deg):
    """Output pixels whose preimage lies outside the original field of view."""
    h, w = shape
    sy, sx = inverse_coordinates(shape, angle_deg)
    return (sy < -EDGE_TOL) | (sy > h - 1 + EDGE_TOL) | (sx < -EDGE_TOL) | (sx > w - 1 + EDGE_TOL)


def _bilinear_sample(img, sy, sx):
    h, w = img.shape
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def rotate(image, labels, angle_deg, fill=0.0):
    """Rotate an image (bilinear) and a label map (nearest, ``UNKNOWN`` fill)."""
    h, w = image.shape
    if angle_deg == 0:
        return image.copy(), labels.copy(), np.zeros((h, w), dtype=bool)
    sy, sx = inverse_coordinates((h, w), angle_deg)
    margin = rotation_margin((h, w), angle_deg)
    out = np.where(margin, fill, _bilinear_sample(image, sy, sx))
    ny = np.clip(np.round(sy).astype(int), 0, h - 1)
    nx = np.clip(np.round(sx).astype(int), 0, w - 1)
    lab = np.where(margin, UNKNOWN, labels[ny, nx])
    return out, lab, margin


def augment(image, labels, rng, max_angle=15.0, flip=True):
    """Random rotation in [-max_angle, max_angle] then optional random flips.

    ``flip=False`` disables flips for anatomy with confusable left/right sides.
    """
    image = np.asarray(image, dtype=np.float64)
    labels = np.asarray(labels)
    angle = float(rng.uniform(-max_angle, max_angle)) if max_angle > 0 else 0.0
    img, lab, margin = rotate(image, labels, angle)
    flip_h = bool(rng.random() < 0.5) if flip else False
    flip_v = bool(rng.random() < 0.5) if flip else False
    if flip_h:
        img, lab, margin = img[:, ::-1], lab[:, ::-1], margin[:, ::-1]
    if flip_v:
        img, lab, margin = img[::-1], lab[::-1], margin[::-1]
    return (
        np.ascontiguousarray(img),
        np.ascontiguousarray(lab),
        AugmentRecord(angle, flip_h, flip_v, np.ascontiguousarray(margin)),
    )
