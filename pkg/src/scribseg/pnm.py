"""Binary portable graymap (P5) files, 8- and 16-bit, through Pillow."""

import numpy as np
from PIL import Image


def write_pgm(path, array, maxval=None):
    """Write a 2-D non-negative integer array; 8-bit when it fits (or ``maxval`` <= 255), else 16-bit."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {a.shape}")
    if maxval is None:
        maxval = 255 if a.max(initial=0) <= 255 else 65535
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise ValueError(f"values outside [0, {maxval}]")
    dtype = np.uint8 if maxval == 255 else np.uint16
    Image.fromarray(a.astype(dtype)).save(path, format="PPM")


def read_pgm(path):
    """Return ``(array, maxval)``."""
    with Image.open(path) as im:
        if im.format != "PPM" or im.mode not in ("L", "I", "I;16", "I;16B"):
            raise ValueError(f"{path}: not a greyscale PGM")
        maxval = 255 if im.mode == "L" else 65535
        arr = np.array(im)
    return (arr.astype(np.uint8) if maxval == 255 else arr.astype(np.uint16)), maxval
