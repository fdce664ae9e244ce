"""Central finite-difference gradient oracle."""

import numpy as np


def numeric_grad(fn, arrays, target, coords, step=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[target]``.

    ``fn`` receives fresh copies of plain numpy arrays and must return a float.
    Only the flat positions in ``coords`` are probed.
    """
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    out = np.empty(len(coords))
    for k, flat in enumerate(coords):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[target].flat[flat] += step
        minus[target].flat[flat] -= step
        out[k] = (fn(*plus) - fn(*minus)) / (2.0 * step)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
