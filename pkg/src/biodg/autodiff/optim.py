from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergenceError


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction, updating tensors in place.

    Parameters whose ``grad`` is None are treated as having zero gradient.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, context=""):
        st = self.state
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(
                    f"non-finite gradient for parameter {p.name or i} at optimizer step {st.step + 1}{context}"
                )
        st.step += 1
        t = st.step
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, st.m, st.v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad.astype(p.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= (st.learning_rate * mhat / (np.sqrt(vhat) + st.epsilon)).astype(p.dtype)
