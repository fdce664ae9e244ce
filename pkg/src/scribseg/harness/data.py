"""Synthetic ellipse volumes and their on-disk layout.

Each case is a short stack of 2D slices. Organs are non-overlapping ellipses
(one class per organ) whose size varies smoothly across the stack, over a
textured background with low-contrast distractor blobs. Intensities are
standardized to [0, 1] per volume.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from ..losses import UNKNOWN, ScribbleMask
from ..metrics import VolumeMeta
from ..pnm import read_pgm, write_pgm
from ..scribblesim import ScribbleSimConfig, simulate_scribbles
from .kvfile import read_kv, write_kv


@dataclass
class SyntheticSpec:
    image_size: int = 64
    num_images: int = 50
    slices_per_case: int = 5
    min_organs: int = 1
    max_organs: int = 3
    num_classes: int = 4
    axis_range: tuple = (5.0, 13.0)
    class_intensity: tuple = (0.75, 0.5, 0.95)
    background_intensity: float = 0.25
    noise: float = 0.06
    distractors: int = 2
    hull_expand_px: int = 5
    spacing_x: float = 1.5
    spacing_y: float = 1.5
    thickness_z: float = 9.0
    seed: int = 0

    def __post_init__(self):
        self.axis_range = tuple(float(a) for a in self.axis_range)
        self.class_intensity = tuple(float(a) for a in self.class_intensity)
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.num_images < 1 or self.slices_per_case < 1:
            raise ValueError("num_images and slices_per_case must be >= 1")
        if self.num_images % self.slices_per_case:
            raise ValueError("num_images must be a multiple of slices_per_case")
        if not 1 <= self.min_organs <= self.max_organs <= self.num_classes - 1:
            raise ValueError("need 1 <= min_organs <= max_organs <= num_classes - 1")
        if len(self.class_intensity) < self.num_classes - 1:
            raise ValueError("one intensity per foreground class required")
        lo, hi = self.axis_range
        if not 1 <= lo <= hi or 2 * hi + 4 > self.image_size:
            raise ValueError(f"axis_range {self.axis_range} does not fit a {self.image_size}px image")

    @property
    def meta(self):
        return VolumeMeta(self.spacing_x, self.spacing_y, self.thickness_z)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(float(x) for x in str(v).split(","))
            elif isinstance(default, int):
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    scribbles: ScribbleMask
    case_id: str
    slice_index: int
    meta: VolumeMeta = field(default_factory=VolumeMeta)


def _ellipse(shape, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _place_organs(spec, rng, count):
    n = spec.image_size
    lo, hi = spec.axis_range
    organs = []
    occupied = np.zeros((n, n), dtype=bool)
    classes = np.sort(rng.choice(np.arange(1, spec.num_classes), size=count, replace=False))
    for cls in classes:
        for _ in range(200):
            ay, ax = rng.uniform(lo, hi, size=2)
            reach = max(ay, ax) + 2
            cy, cx = rng.uniform(reach, n - 1 - reach, size=2)
            theta = rng.uniform(0, np.pi)
            m = _ellipse((n, n), cy, cx, ay, ax, theta)
            if not (ndimage.binary_dilation(m, iterations=3) & occupied).any():
                occupied |= m
                organs.append((int(cls), cy, cx, ay, ax, theta))
                break
    if not organs:
        raise ValueError("could not place any organ; enlarge image_size or shrink axis_range")
    return organs


def _case(spec, rng, case_id):
    n = spec.image_size
    count = int(rng.integers(spec.min_organs, spec.max_organs + 1))
    organs = _place_organs(spec, rng, count)
    blobs = [
        (rng.uniform(4, n - 5), rng.uniform(4, n - 5), rng.uniform(2, 5), rng.uniform(0.1, 0.25))
        for _ in range(spec.distractors)
    ]
    gy, gx = rng.normal(0, 0.05, size=2)
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1.0)
    k = spec.slices_per_case
    raw, masks = [], []
    for z in range(k):
        # organs swell toward the middle of the stack
        scale = 0.7 + 0.3 * np.sin(np.pi * (z + 1) / (k + 1))
        mask = np.zeros((n, n), dtype=np.int64)
        img = spec.background_intensity + gy * (yy - 0.5) + gx * (xx - 0.5)
        for cy, cx, r, amp in blobs:
            img = img + amp * np.exp(-((yy * (n - 1) - cy) ** 2 + (xx * (n - 1) - cx) ** 2) / (2 * r * r))
        for cls, cy, cx, ay, ax, theta in organs:
            m = _ellipse((n, n), cy, cx, max(ay * scale, 1.0), max(ax * scale, 1.0), theta)
            mask[m] = cls
            img = np.where(m, spec.class_intensity[cls - 1], img)
        img = ndimage.gaussian_filter(img, 0.6) + rng.normal(0, spec.noise, size=(n, n))
        raw.append(img)
        masks.append(mask)
    vol = np.stack(raw)
    vol = (vol - vol.min()) / (vol.max() - vol.min())
    return vol, masks


def generate_dataset(spec):
    """Deterministic list of :class:`Sample`, ``spec.num_images`` long."""
    rng = np.random.default_rng(spec.seed)
    sim = ScribbleSimConfig(hull_expand_px=spec.hull_expand_px, seed=spec.seed)
    out = []
    for c in range(spec.num_images // spec.slices_per_case):
        case_id = f"case{c:03d}"
        vol, masks = _case(spec, rng, case_id)
        for z, (img, mask) in enumerate(zip(vol, masks)):
            scr = simulate_scribbles(mask, sim, num_classes=spec.num_classes)
            out.append(Sample(img, mask, scr, case_id, z, spec.meta))
    return out


def group_cases(samples):
    """``{case_id: [samples sorted by slice]}`` preserving first-seen order."""
    cases = {}
    for s in samples:
        cases.setdefault(s.case_id, []).append(s)
    return {k: sorted(v, key=lambda s: s.slice_index) for k, v in cases.items()}


# --------------------------------------------------------------------- disk

def save_dataset(samples, root, num_classes):
    os.makedirs(root, exist_ok=True)
    for case_id, items in group_cases(samples).items():
        d = os.path.join(root, case_id)
        os.makedirs(d, exist_ok=True)
        meta = dict(items[0].meta.to_dict(), slices=len(items), num_classes=num_classes)
        write_kv(os.path.join(d, "meta.txt"), meta)
        for s in items:
            stem = os.path.join(d, f"slice{s.slice_index:02d}")
            write_pgm(stem + "_image.pgm", np.round(np.clip(s.image, 0, 1) * 65535).astype(np.uint16), 65535)
            write_pgm(stem + "_mask.pgm", s.mask.astype(np.uint8), 255)
            write_pgm(stem + "_scribble.pgm", s.scribbles.labels.astype(np.uint8), 255)


def load_dataset(root):
    samples = []
    for case_id in sorted(os.listdir(root)):
        d = os.path.join(root, case_id)
        meta_path = os.path.join(d, "meta.txt")
        if not os.path.isfile(meta_path):
            continue
        kv = read_kv(meta_path)
        meta = VolumeMeta.from_dict(kv)
        num_classes = int(kv["num_classes"])
        for z in range(int(kv["slices"])):
            stem = os.path.join(d, f"slice{z:02d}")
            img, maxval = read_pgm(stem + "_image.pgm")
            mask, _ = read_pgm(stem + "_mask.pgm")
            scr, _ = read_pgm(stem + "_scribble.pgm")
            labels = scr.astype(np.int64)
            samples.append(
                Sample(img.astype(np.float64) / maxval, mask.astype(np.int64),
                       ScribbleMask(labels, num_classes), case_id, z, meta)
            )
    if not samples:
        raise FileNotFoundError(f"no cases found under {root}")
    return samples


def labeled_fraction(samples):
    return float(np.mean([(s.scribbles.labels != UNKNOWN).mean() for s in samples]))
