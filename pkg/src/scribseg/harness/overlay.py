"""Contour overlays of predicted (and optionally true) classes on the input slice."""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

# one colour per foreground class; cycles when there are more classes
PALETTE = np.array(
    [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180)],
    dtype=np.uint8,
)
TRUTH_COLOUR = np.array((255, 255, 255), dtype=np.uint8)


def contour(mask):
    """Pixels of ``mask`` with a 4-neighbour outside it (image border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def overlay_rgb(image, pred, truth=None, scale=4):
    """(H*scale, W*scale, 3) uint8: grey image, true contours white, predicted contours coloured."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    grey = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    rgb = np.repeat((grey * 255).round().astype(np.uint8)[..., None], 3, axis=2)
    rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)

    def up(m):
        return np.asarray(m).repeat(scale, axis=0).repeat(scale, axis=1)

    if truth is not None:
        for c in np.unique(truth):
            if c > 0:
                rgb[contour(up(truth) == c)] = TRUTH_COLOUR
    for c in np.unique(pred):
        if c > 0:
            rgb[contour(up(pred) == c)] = PALETTE[(int(c) - 1) % len(PALETTE)]
    return rgb


def save_overlay(path, image, pred, truth=None, scale=4):
    Image.fromarray(overlay_rgb(image, pred, truth, scale)).save(path)
    return path
