"""Straight-line reference implementations used only by the tests.

Nothing here imports the code under test beyond plain data containers.
"""

import math

import numpy as np


def softmax_rows(x):
    out = np.empty_like(x)
    for p in range(x.shape[0]):
        m = max(x[p])
        e = [math.exp(v - m) for v in x[p]]
        s = sum(e)
        for q in range(x.shape[1]):
            out[p, q] = e[q] / s
    return out


def affinity_loop(raw, w, b):
    """S[p, q] = sigmoid(sum_c w_c (A_c[p, q] + A_c[q, p]) + b), A_c row-softmaxed."""
    hw, _, c = raw.shape
    rows = [softmax_rows(raw[:, :, k]) for k in range(c)]
    S = np.empty((hw, hw))
    for p in range(hw):
        for q in range(hw):
            z = b
            for k in range(c):
                z += w[k] * (rows[k][p, q] + rows[k][q, p])
            S[p, q] = 1.0 / (1.0 + math.exp(-z))
    return S


def decay_loop(h, w, sigma):
    M = np.empty((h * w, h * w))
    for p in range(h * w):
        py, px = divmod(p, w)
        for q in range(h * w):
            qy, qx = divmod(q, w)
            M[p, q] = math.exp(-((px - qx) ** 2 + (py - qy) ** 2) / (2 * sigma * sigma))
    return M


def kernel_loop(fp, fq, kernels):
    s = 0.0
    for weight, sigma, idx in kernels:
        d2 = sum((fp[i] - fq[i]) ** 2 for i in idx)
        s += weight * math.exp(-d2 / (2 * sigma * sigma))
    return s


def pce_loop(probs, labels, unknown=255):
    total, n = 0.0, 0
    for y in range(labels.shape[0]):
        for x in range(labels.shape[1]):
            if labels[y, x] != unknown:
                total -= math.log(probs[labels[y, x], y, x])
                n += 1
    return total / n if n else 0.0


def mcrf_loop(probs, image, valid, radius, kernels, windowed=True):
    """Quadruple loop over pixel pairs and class pairs i != j."""
    c, h, w = probs.shape
    total = 0.0
    n = int(valid.sum())
    for py in range(h):
        for px in range(w):
            if not valid[py, px]:
                continue
            fp = (image[py, px], px / (w - 1), py / (h - 1))
            for qy in range(h):
                for qx in range(w):
                    if not valid[qy, qx] or (qy, qx) == (py, px):
                        continue
                    if windowed and max(abs(qy - py), abs(qx - px)) >= radius:
                        continue
                    fq = (image[qy, qx], qx / (w - 1), qy / (h - 1))
                    s = kernel_loop(fp, fq, kernels)
                    cross = 0.0
                    for i in range(c):
                        for j in range(c):
                            if i != j:
                                cross += probs[i, py, px] * probs[j, qy, qx]
                    total += s * cross
    return total / n if n else 0.0


def atn_loop(small_probs, S, M, cvalid, radius):
    c, h, w = small_probs.shape
    total = 0.0
    n = int(cvalid.sum())
    for p in range(h * w):
        py, px = divmod(p, w)
        if not cvalid[py, px]:
            continue
        for q in range(h * w):
            qy, qx = divmod(q, w)
            if q == p or not cvalid[qy, qx] or max(abs(qy - py), abs(qx - px)) >= radius:
                continue
            cross = 0.0
            for i in range(c):
                for j in range(c):
                    if i != j:
                        cross += small_probs[i, py, px] * small_probs[j, qy, qx]
            total += M[p, q] * S[p, q] * cross
    return total / n if n else 0.0


def surface_loop(mask):
    d, h, w = mask.shape
    pts = []
    for z in range(d):
        for y in range(h):
            for x in range(w):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    zz, yy, xx = z + dz, y + dy, x + dx
                    if not (0 <= zz < d and 0 <= yy < h and 0 <= xx < w) or not mask[zz, yy, xx]:
                        pts.append((z, y, x))
                        break
    return pts


def hd95_loop(a, b, spacing_zyx):
    pa, pb = surface_loop(a), surface_loop(b)
    if not pa or not pb:
        return None

    def directed(src, dst):
        out = []
        for s in src:
            best = min(
                math.sqrt(sum(((s[k] - t[k]) * spacing_zyx[k]) ** 2 for k in range(3))) for t in dst
            )
            out.append(best)
        out.sort()
        rank = math.ceil(0.95 * len(out))
        return out[max(rank, 1) - 1]

    return max(directed(pa, pb), directed(pb, pa))


def dice_loop(a, b):
    inter = sa = sb = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += bool(x and y)
        sa += bool(x)
        sb += bool(y)
    return 1.0 if sa + sb == 0 else 2 * inter / (sa + sb)


def bilinear_loop(img, th, tw):
    """Half-pixel-centre bilinear resampling of a (C, H, W) array, edge-clamped."""
    c, h, w = img.shape
    out = np.zeros((c, th, tw))
    for i in range(th):
        sy = min(max((i + 0.5) * h / th - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(tw):
            sx = min(max((j + 0.5) * w / tw - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            for k in range(c):
                out[k, i, j] = (
                    (1 - fy) * ((1 - fx) * img[k, y0, x0] + fx * img[k, y0, x1])
                    + fy * ((1 - fx) * img[k, y1, x0] + fx * img[k, y1, x1])
                )
    return out


def block_all_loop(valid, th, tw):
    h, w = valid.shape
    fy, fx = h // th, w // tw
    out = np.zeros((th, tw), dtype=bool)
    for i in range(th):
        for j in range(tw):
            out[i, j] = all(valid[i * fy + a, j * fx + b] for a in range(fy) for b in range(fx))
    return out
