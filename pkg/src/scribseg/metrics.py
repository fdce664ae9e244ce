"""Spacing-aware 3D Dice and 95th-percentile Hausdorff distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNDEFINED = "undefined"


@dataclass(frozen=True)
class VolumeMeta:
    spacing_x: float = 1.0
    spacing_y: float = 1.0
    thickness_z: float = 1.0

    def __post_init__(self):
        if min(self.spacing_x, self.spacing_y, self.thickness_z) <= 0:
            raise ValueError("spacing and thickness must be positive")

    @property
    def zyx(self):
        return np.array([self.thickness_z, self.spacing_y, self.spacing_x])

    def to_dict(self):
        return {"spacing_x": self.spacing_x, "spacing_y": self.spacing_y, "thickness_z": self.thickness_z}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["spacing_x"]), float(d["spacing_y"]), float(d["thickness_z"]))


def _check_shapes(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def dice3d(pred, gt, class_id):
    """``2|A & B| / (|A| + |B|)``; 1.0 when the class is absent from both."""
    pred, gt = _check_shapes(pred, gt)
    a = pred == class_id
    b = gt == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def surface_voxels(mask):
    """Voxels of ``mask`` with at least one 6-neighbour outside it.

    Positions beyond the volume count as outside.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 2:
        m = m[None]
    p = np.pad(m, 1)
    interior = m.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def _directed(src, dst, chunk=4096):
    # nearest-neighbour distance from every row of src to the set dst
    out = np.empty(len(src))
    for start in range(0, len(src), chunk):
        block = src[start:start + chunk]
        diff = block[:, None, :] - dst[None, :, :]
        out[start:start + chunk] = np.sqrt((diff * diff).sum(axis=2).min(axis=1))
    return out


def nearest_rank(values, pct=95.0):
    """Smallest value with at least ``pct`` percent of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    rank = max(int(math.ceil(pct / 100.0 * len(v))), 1)
    return float(v[rank - 1])


def hd95(pred, gt, class_id, meta=VolumeMeta()):
    """Symmetric 95th-percentile surface distance in mm, or ``None`` when either
    surface is empty."""
    pred, gt = _check_shapes(pred, gt)
    sa = surface_voxels(pred == class_id)
    sb = surface_voxels(gt == class_id)
    if not sa.any() or not sb.any():
        return None
    pa = np.argwhere(sa) * meta.zyx
    pb = np.argwhere(sb) * meta.zyx
    return max(nearest_rank(_directed(pa, pb)), nearest_rank(_directed(pb, pa)))


@dataclass
class MetricsReport:
    """Per-case, per-class Dice and HD95 (``None`` = undefined)."""

    records: list = field(default_factory=list)

    def add(self, case_id, class_id, dice, hd):
        self.records.append({"case": case_id, "class": int(class_id), "dice": float(dice), "hd95": hd})

    def _hd(self, rows, penalty):
        hds = [r["hd95"] if r["hd95"] is not None else penalty for r in rows]
        hds = [h for h in hds if h is not None]
        return float(np.mean(hds)) if hds else None

    def per_case(self, penalty=None):
        """``{case: (mean dice, mean hd95 or None)}`` over the recorded classes.

        Undefined distances are skipped, or replaced by ``penalty`` when given.
        """
        out = {}
        for case in dict.fromkeys(r["case"] for r in self.records):
            rows = [r for r in self.records if r["case"] == case]
            out[case] = (float(np.mean([r["dice"] for r in rows])), self._hd(rows, penalty))
        return out

    def per_class(self, penalty=None):
        out = {}
        for c in sorted({r["class"] for r in self.records}):
            rows = [r for r in self.records if r["class"] == c]
            out[c] = (float(np.mean([r["dice"] for r in rows])), self._hd(rows, penalty))
        return out

    def undefined_count(self):
        return sum(r["hd95"] is None for r in self.records)

    def median_dice(self):
        return float(np.median([d for d, _ in self.per_case().values()]))

    def median_hd95(self, penalty=None):
        vals = [h for _, h in self.per_case(penalty).values() if h is not None]
        return float(np.median(vals)) if vals else None

    def to_lines(self):
        lines = []
        for r in self.records:
            hd = UNDEFINED if r["hd95"] is None else repr(r["hd95"])
            lines.append(f"case={r['case']} class={r['class']} dice={r['dice']!r} hd95_mm={hd}")
        return lines

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def from_lines(cls, lines):
        rep = cls()
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kv = dict(tok.split("=", 1) for tok in line.split())
            hd = None if kv["hd95_mm"] == UNDEFINED else float(kv["hd95_mm"])
            rep.add(kv["case"], int(kv["class"]), float(kv["dice"]), hd)
        return rep

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_lines(fh)


def evaluate_volume(pred, gt, meta, classes, case_id="0", report=None):
    """Append Dice/HD95 for each class in ``classes`` to ``report`` (created if None)."""
    report = report if report is not None else MetricsReport()
    for c in classes:
        report.add(case_id, c, dice3d(pred, gt, c), hd95(pred, gt, c, meta))
    return report


def volume_diagonal(shape, meta):
    """Largest possible voxel-to-voxel distance in mm for a (D, H, W) volume."""
    d, h, w = shape
    return float(math.sqrt(((d - 1) * meta.thickness_z) ** 2 + ((h - 1) * meta.spacing_y) ** 2 + ((w - 1) * meta.spacing_x) ** 2))
