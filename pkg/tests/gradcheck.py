"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np

from tsxplain import tensor as tt

ABS_TOL = 1e-4
REL_TOL = 1e-3


def step(x):
    return 1e-5 * max(1.0, abs(x))


def numeric_grad(f, arrays, which, index=None):
    """d f / d arrays[which] by central differences (all entries, or one flat ``index``)."""
    base = arrays[which]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    positions = range(flat.size) if index is None else [index]
    for i in positions:
        orig = flat[i]
        h = step(orig)
        flat[i] = orig + h
        up = f(arrays)
        flat[i] = orig - h
        down = f(arrays)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(build, arrays):
    """Run ``build`` on leaf tensors, backprop the scalar, return every leaf gradient."""
    leaves = [tt.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(leaves)
    tt.backward(out)
    return [np.zeros_like(a) if l.grad is None else l.grad for a, l in zip(arrays, leaves)]


def scalar_value(build, arrays):
    with tt.no_grad():
        return float(build([tt.Tensor(a) for a in arrays]).data)


def max_violation(build, arrays):
    """Largest |analytic - numeric| / max(ABS_TOL, REL_TOL * |numeric|); <= 1 passes."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ana = analytic_grad(build, arrays)
    worst = 0.0
    for k in range(len(arrays)):
        num = numeric_grad(lambda arrs: scalar_value(build, arrs), arrays, k)
        allowed = np.maximum(ABS_TOL, REL_TOL * np.abs(num))
        worst = max(worst, float(np.max(np.abs(ana[k] - num) / allowed)))
    return worst
