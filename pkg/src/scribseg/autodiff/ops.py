"""Differentiable primitives.

Each primitive computes its forward value with numpy and, when an input
requires grad, records a closure mapping the output gradient to one gradient
per input (``None`` where an input is constant).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "div")


def neg(a):
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def back(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_result(a.data ** exponent, (a,), back, "power")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # Split by sign so neither branch overflows in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    # maximum (unlike a masked select) lets NaN through, so bad inputs still surface in the loss
    return make_result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def masked_sum(a, mask, axis=None):
    """Sum of ``a`` over positions where the constant ``mask`` is nonzero.

    The mask acts as a 0/1 weight; masked-out positions receive exactly zero
    gradient.
    """
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    try:
        weights = np.broadcast_to(m, a.shape).astype(np.float64)
    except ValueError:
        raise ShapeError("masked_sum", f"mask {m.shape} does not fit {a.shape}") from None
    out = (np.where(weights > 0, a.data, 0.0)).sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) * weights,)

    return make_result(out, (a,), back, "masked_sum")


# ------------------------------------------------------------ normalization

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), back, "log_softmax")


def layer_norm(a, axis=-1, eps=1e-5):
    """Normalize to zero mean and unit variance along ``axis`` (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result(xhat, (a,), back, "layer_norm")


# -------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}", axes=(-1, -2))
    out = a.data @ b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), back, "matmul")


# -------------------------------------------------------------------- shaping

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", f"invalid permutation {axes} for rank {a.ndim}", axes=axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            bad = tuple(i for i in range(len(ref)) if i != ax and t.shape[i] != ref[i])
            raise ShapeError("concat", f"shapes {ref} and {t.shape} differ off the concat axis", axes=bad)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return make_result(out, tensors, back, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def index(a, key):
    """Basic slicing or advanced (integer-array) indexing.

    Repeated indices accumulate in the backward pass.
    """
    a = as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError("index", str(exc)) from None
    out = np.array(out, dtype=np.float64, copy=True)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return make_result(out, (a,), back, "index")


slice_ = index


def pad2d(a, pad):
    """Zero-pad the last two axes by ``pad`` on every side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, widths)

    def back(g):
        return (g[..., pad:-pad, pad:-pad],)

    return make_result(out, (a,), back, "pad2d")


# --------------------------------------------------------------- convolution

def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride):
    # xp: (N, C, Hp, Wp) -> (N, Ho, Wo, C, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _conv_forward(x, w, stride, pad, keep_cols=False):
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[1], cols.shape[2]
    mat = cols.reshape(n * ho * wo, c * kh * kw)
    out = (mat @ w.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if keep_cols:
        return out, mat
    return out


def _conv_input_grad(g, w, stride, pad, x_shape):
    # adjoint of _conv_forward in its input argument
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    if stride == 1 and pad <= kh - 1 and pad <= kw - 1 and kh - 1 - pad == kw - 1 - pad:
        # full correlation with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return _conv_forward(g, flipped, 1, kh - 1 - pad)
    if stride == kh == kw and pad == 0 and ho * stride == h and wo * stride == wd:
        # non-overlapping windows: every input pixel sees exactly one output
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        blocks = (gmat @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
        return blocks.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, wd)
    gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dcols = (gmat @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    hp, wp = h + 2 * pad, wd + 2 * pad
    dxp = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:pad + h, pad:pad + wd]
    return dxp


def _conv_weight_grad(x, g, stride, pad, w_shape, mat=None):
    o, c, kh, kw = w_shape
    if mat is None:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = _im2col(xp, kh, kw, stride)
        n, ho, wo = cols.shape[:3]
        mat = cols.reshape(n * ho * wo, c * kh * kw)
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (gmat.T @ mat).reshape(w_shape)


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels, weight expects {w.shape[1]}", axes=(1, 1))
    kh, kw = w.shape[2:]
    if _conv_out(x.shape[2], kh, stride, pad) < 1 or _conv_out(x.shape[3], kw, stride, pad) < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}", axes=(2, 3))
    out, mat = _conv_forward(x.data, w.data, stride, pad, keep_cols=True)
    if not w.requires_grad:
        mat = None
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError("conv2d", f"bias shape {b.shape} != ({w.shape[0]},)", axes=(0,))
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gx = _conv_input_grad(g, w.data, stride, pad, x.shape) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, stride, pad, w.shape, mat) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_result(out, parents, back, "conv2d")


def transposed_conv2d(x, w, b=None, stride=2, pad=0):
    """Adjoint of :func:`conv2d`; ``w`` has shape (C_in, C_out, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("transposed_conv2d", f"expected 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError("transposed_conv2d", f"input has {x.shape[1]} channels, weight expects {w.shape[0]}", axes=(1, 0))
    n, _, h, wd = x.shape
    cout, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    out_shape = (n, cout, (h - 1) * stride - 2 * pad + kh, (wd - 1) * stride - 2 * pad + kw)
    out = _conv_input_grad(x.data, w.data, stride, pad, out_shape)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("transposed_conv2d", f"bias shape {b.shape} != ({cout},)", axes=(0,))
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def back(g):
        gx = _conv_forward(g, w.data, stride, pad) if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, stride, pad, w.shape) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_result(out, parents, back, "transposed_conv2d")


def max_pool2d(x, size=2):
    """Non-overlapping max pooling over the last two axes (stride == size).

    Ties send the whole gradient to the first maximal element in row-major
    window order.
    """
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % size or w % size:
        raise ShapeError("max_pool2d", f"spatial dims {(h, w)} not divisible by {size}", axes=(-2, -1))
    ho, wo = h // size, w // size
    win = x.data.reshape(*lead, ho, size, wo, size)
    win = np.moveaxis(win, -3, -2).reshape(*lead, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(*lead, ho, wo, size, size)
        return (np.moveaxis(gw, -2, -3).reshape(x.shape),)

    return make_result(out, (x,), back, "max_pool2d")


# -------------------------------------------------------------- resampling

def bilinear_matrix(src, dst):
    """(dst, src) interpolation weights, half-pixel centres, edge clamped."""
    mat = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        pos = min(max(pos, 0.0), src - 1.0)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def bilinear_interpolate(x, target_h, target_w):
    """Resize the last two axes with separable bilinear weights."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("bilinear_interpolate", f"need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if target_h < 1 or target_w < 1:
        raise ShapeError("bilinear_interpolate", f"invalid target size {(target_h, target_w)}", axes=(-2, -1))
    ry = bilinear_matrix(h, target_h)
    rx = bilinear_matrix(w, target_w)
    out = ry @ x.data @ rx.T

    def back(g):
        return (ry.T @ g @ rx,)

    return make_result(out, (x,), back, "bilinear_interpolate")



# --------------------------------------------------------- neighbourhoods

def offset_bounds(h, w, dy, dx):
    """Row/column ranges of pixels p whose neighbour p + (dy, dx) is inside."""
    return max(0, -dy), min(h, h - dy), max(0, -dx), min(w, w - dx)


def shifted_agreement(p, offsets):
    """Per-offset inner products over the leading (class) axis.

    For ``p`` of shape (C, H, W) returns (len(offsets), H, W) with
    ``out[k, y, x] = sum_c p[c, y, x] * p[c, y + dy_k, x + dx_k]`` and 0 where
    the neighbour falls outside the grid.
    """
    p = as_tensor(p)
    if p.ndim != 3:
        raise ShapeError("shifted_agreement", f"expected (C, H, W), got {p.shape}")
    _, h, w = p.shape
    x = p.data
    out = np.zeros((len(offsets), h, w))
    for k, (dy, dx) in enumerate(offsets):
        y0, y1, x0, x1 = offset_bounds(h, w, dy, dx)
        if y0 < y1 and x0 < x1:
            out[k, y0:y1, x0:x1] = (x[:, y0:y1, x0:x1] * x[:, y0 + dy:y1 + dy, x0 + dx:x1 + dx]).sum(axis=0)

    def back(g):
        gp = np.zeros_like(x)
        for k, (dy, dx) in enumerate(offsets):
            y0, y1, x0, x1 = offset_bounds(h, w, dy, dx)
            if y0 >= y1 or x0 >= x1:
                continue
            gk = g[k, y0:y1, x0:x1]
            gp[:, y0:y1, x0:x1] += gk * x[:, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            gp[:, y0 + dy:y1 + dy, x0 + dx:x1 + dx] += gk * x[:, y0:y1, x0:x1]
        return (gp,)

    return make_result(out, (p,), back, "shifted_agreement")
