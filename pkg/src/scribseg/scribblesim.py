"""Scribble simulation from dense label maps.

Each foreground component is eroded until one more erosion would split or
erase it, then thinned to a curve. The background gets a single curve: the
outline of the convex hull of all foreground, grown by a few pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .losses import UNKNOWN, ScribbleMask

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class ScribbleSimConfig:
    hull_expand_px: int = 5
    # The procedure is deterministic; the seed is carried so callers can
    # record it alongside generated data.
    seed: int = 0

    def __post_init__(self):
        if self.hull_expand_px < 0:
            raise ValueError("hull_expand_px must be >= 0")


def count_components(mask):
    return ndimage.label(mask, structure=EIGHT)[1]


def _ring(img):
    # eight neighbours counter-clockwise from east, zero outside the image
    p = np.pad(img, 1)
    h, w = img.shape
    return [
        p[1:h + 1, 2:w + 2],  # E
        p[0:h, 2:w + 2],      # NE
        p[0:h, 1:w + 1],      # N
        p[0:h, 0:w],          # NW
        p[1:h + 1, 0:w],      # W
        p[2:h + 2, 0:w],      # SW
        p[2:h + 2, 1:w + 1],  # S
        p[2:h + 2, 2:w + 2],  # SE
    ]


def skeletonize(mask):
    """Two-subiteration parallel thinning (Zhang-Suen family).

    A pixel is deleted only when it is a simple boundary point: exactly one
    8-connected run of foreground neighbours (crossing number 1) and a
    neighbourhood thickness in [2, 3]. The sub-iterations alternate between
    removing south-east and north-west boundary points, which keeps 2x2
    blocks and two-pixel-wide diagonals from vanishing.
    """
    img = np.asarray(mask, dtype=bool).copy()
    while True:
        changed = False
        for step in (0, 1):
            b = _ring(img)
            crossing = sum(~b[i] & (b[i + 1] | b[(i + 2) % 8]) for i in (0, 2, 4, 6))
            n1 = sum(b[k] | b[k - 1] for k in (1, 3, 5, 7))
            n2 = sum(b[k] | b[(k + 1) % 8] for k in (1, 3, 5, 7))
            thickness = np.minimum(n1, n2)
            if step == 0:
                side = ~((b[1] | b[2] | ~b[7]) & b[0])
            else:
                side = ~((b[5] | b[6] | ~b[3]) & b[4])
            remove = img & (crossing == 1) & (thickness >= 2) & (thickness <= 3) & side
            if remove.any():
                img &= ~remove
                changed = True
        if not changed:
            return img


def erode_until_disconnect(mask):
    """Erode with a 3x3 square while the component count stays put and the
    mask survives; return the last mask before that would fail."""
    cur = np.asarray(mask, dtype=bool)
    if not cur.any():
        return cur.copy()
    n0 = count_components(cur)
    while True:
        nxt = ndimage.binary_erosion(cur, structure=EIGHT, border_value=0)
        if not nxt.any() or count_components(nxt) > n0:
            return cur.copy()
        if count_components(nxt) < n0:
            # a whole piece vanished; stop before losing it
            return cur.copy()
        cur = nxt


def convex_hull(points):
    """Andrew's monotone chain. ``points`` is (N, 2) of (x, y); returns CCW vertices."""
    pts = sorted(set(map(tuple, np.asarray(points).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def rasterize_hull(hull, shape):
    """Boolean mask of lattice pixels inside or on the hull polygon."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    inside = np.zeros(shape, dtype=bool)
    if len(hull) == 0:
        return inside
    if len(hull) == 1:
        x, y = hull[0].astype(int)
        inside[y, x] = True
        return inside
    if len(hull) == 2:
        (ax, ay), (bx, by) = hull
        dx, dy = bx - ax, by - ay
        t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        dist2 = (xs - ax - t * dx) ** 2 + (ys - ay - t * dy) ** 2
        return dist2 <= 0.25
    inside[:] = True
    for (ax, ay), (bx, by) in zip(hull, np.roll(hull, -1, axis=0)):
        inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= -1e-9
    return inside


def disc(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def background_ring(foreground, hull_expand_px):
    """One-pixel outline of the dilated convex hull of ``foreground``."""
    fg = np.asarray(foreground, dtype=bool)
    if not fg.any():
        return np.zeros_like(fg)
    ys, xs = np.nonzero(fg)
    region = rasterize_hull(convex_hull(np.stack([xs, ys], axis=1)), fg.shape) | fg
    if hull_expand_px > 0:
        region = ndimage.binary_dilation(region, structure=disc(hull_expand_px))
    ring = region & ~ndimage.binary_erosion(region, structure=EIGHT, border_value=1)
    return ring & ~fg


def simulate_scribbles(full_mask, config=None, num_classes=None):
    """Sparse labels from a dense class map (0 = background).

    Unscribbled pixels are ``UNKNOWN``.
    """
    config = config or ScribbleSimConfig()
    dense = np.asarray(full_mask)
    if dense.ndim != 2:
        raise ValueError(f"expected a 2-D class map, got shape {dense.shape}")
    if num_classes is None:
        num_classes = int(dense.max()) + 1 if dense.size else 1
        num_classes = max(num_classes, 2)
    labels = np.full(dense.shape, UNKNOWN, dtype=np.int64)
    for c in range(1, int(dense.max()) + 1 if dense.size else 1):
        comps, n = ndimage.label(dense == c, structure=EIGHT)
        for k in range(1, n + 1):
            curve = skeletonize(erode_until_disconnect(comps == k))
            labels[curve] = c
    foreground = dense > 0
    labels[background_ring(foreground, config.hull_expand_px)] = 0
    return ScribbleMask(labels, num_classes)
