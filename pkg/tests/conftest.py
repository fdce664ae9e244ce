import numpy as np
import pytest

from scribseg.autodiff import Tensor, backward, numeric_grad, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def grad_check(fn, arrays, n_coords=20, rng=None, step=1e-5, targets=None):
    """Compare reverse-mode gradients of scalar ``fn(*tensors)`` against central
    differences at ``n_coords`` random flat positions of each target input.

    Returns the worst relative error seen. The denominator floor scales with
    the output magnitude: central differences carry roundoff of about
    ``eps * |f| / step``, so a true zero gradient reads as ~1e-11 noise.
    """
    rng = rng or np.random.default_rng(0)
    targets = range(len(arrays)) if targets is None else targets
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    backward(out)
    floor = max(1e-8, 1e-7 * max(1.0, abs(float(out.data))))

    def scalar(*arrs):
        return float(fn(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for t in targets:
        size = np.asarray(arrays[t]).size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        grad = tensors[t].grad
        # an input the output never touched has no grad; finite differences must then read 0
        grad = np.zeros(np.shape(arrays[t])) if grad is None else grad
        analytic = grad.reshape(-1)[coords]
        numeric = numeric_grad(scalar, arrays, t, coords, step=step)
        worst = max(worst, float(relative_error(analytic, numeric, floor).max()))
    return worst
