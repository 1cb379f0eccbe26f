"""Loss functions as fused graph ops (closed-form backward)."""
from __future__ import annotations

import numpy as np

from ..errors import NormalizationError, ShapeError
from .tensor import Tensor, _make, add, mul

PROB_CLIP = 1e-7


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; predictions clipped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(target, dtype=pred.dtype)
    if y.shape != pred.shape:
        if y.size == pred.data.size:
            y = y.reshape(pred.shape)
        else:
            raise ShapeError(f"bce_loss: pred {pred.shape} vs target {y.shape}")
    p = pred.data
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    n = p.size
    value = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    inside = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)

    def back(g):
        dp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
        return (g * dp * inside,)

    return _make(np.asarray(value, dtype=pred.dtype), (pred,), back)


def cce_loss(pred: Tensor, target, tol: float = 1e-6) -> Tensor:
    """Mean over the batch of ``-sum_j y_j log p_j`` with ``p`` clipped at 1e-7.

    ``target`` is one-hot (N, M) or an integer label vector (N,).
    """
    p = pred.data
    if p.ndim != 2:
        raise ShapeError(f"cce_loss expects (N, M) probabilities, got {p.shape}")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > tol):
        dev = np.abs(sums - 1).max()
        raise NormalizationError(f"cce_loss: prediction rows must sum to 1 (max deviation {dev:.3g})")
    t = np.asarray(target)
    if t.ndim == 1:
        y = np.zeros_like(p)
        y[np.arange(len(t)), t.astype(int)] = 1.0
    else:
        y = t.astype(p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"cce_loss: pred {p.shape} vs target {y.shape}")
    pc = np.maximum(p, PROB_CLIP)
    n = p.shape[0]
    value = -(y * np.log(pc)).sum() / n

    def back(g):
        return (g * (-(y / pc) * (p > PROB_CLIP)) / n,)

    return _make(np.asarray(value, dtype=p.dtype), (pred,), back)


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 1.0) -> Tensor:
    """Mean over rows of ``max(d(a,p) - d(a,n) + margin, 0)`` with Euclidean d."""
    a, p, n = anchor.data, positive.data, negative.data
    dap_vec, dan_vec = a - p, a - n
    dap = np.sqrt((dap_vec ** 2).sum(axis=-1))
    dan = np.sqrt((dan_vec ** 2).sum(axis=-1))
    raw = dap - dan + margin
    active = raw > 0
    m = a.shape[0] if a.ndim == 2 else 1
    value = np.maximum(raw, 0).sum() / m

    def back(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            up = np.where((dap > 0)[..., None], dap_vec / dap[..., None], 0.0)
            un = np.where((dan > 0)[..., None], dan_vec / dan[..., None], 0.0)
        w = (g * active / m)[..., None]
        return (w * (up - un), -w * up, w * un)

    return _make(np.asarray(value, dtype=a.dtype), (anchor, positive, negative), back)


def combined_loss(loss_a: Tensor, loss_b: Tensor, theta: float, alpha: float) -> Tensor:
    """``theta * loss_a + alpha * loss_b``; both weights must be nonnegative."""
    if theta < 0 or alpha < 0:
        raise ValueError("loss weights must be nonnegative")
    return add(mul(loss_a, float(theta)), mul(loss_b, float(alpha)))
