"""Central finite-difference gradient checks in float64."""
from __future__ import annotations

import numpy as np

from biodg.autodiff.tensor import Tensor

EPS = 1e-6
TOL = 1e-4


def numeric_grad(f, arrays, i, eps=EPS):
    """d f / d arrays[i] by central differences; ``f`` maps numpy arrays to a float."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(*arrays)
        x[idx] = old - eps
        lo = f(*arrays)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    """Norm-relative error, safe when both gradients vanish."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def check(build, arrays, wrt=None, eps=EPS):
    """Compare analytic and numeric gradients of the scalar ``build(*tensors)``.

    ``build`` receives Tensors and returns a scalar Tensor. ``wrt`` picks which
    inputs to check (default: all). Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    out.backward()

    def f(*arrs):
        return float(build(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i in wrt:
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(ana, numeric_grad(f, arrays, i, eps)))
    return worst
