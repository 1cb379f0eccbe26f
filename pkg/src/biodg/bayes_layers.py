"""Mean-field Gaussian conv/dense layers with flipout weight perturbations.

A sampled forward computes, per example n,

    out_n = x_n W_mean + ((x_n * s_n) dW) * r_n + b

with ``dW = softplus(rho) * E``. ``E`` is one standard-normal draw shared by
the batch; ``s_n`` and ``r_n`` are Rademacher sign vectors drawn per example,
which decorrelates the perturbation across the batch. Without an rng the
layer runs on the posterior mean.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import tensor as T
from .autodiff.layers import Layer, conv_out_shape, he_uniform, register_layer
from .autodiff.tensor import Tensor, _make

PRIOR_SIGMA = 1.0
INIT_STDDEV = 0.05


def rho_for_stddev(stddev: float) -> float:
    """Inverse softplus."""
    return float(math.log(math.expm1(stddev)))


def philox_rng(seed: int, *counter: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, counter...), e.g. (seed, step)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, counter)])))


def rademacher(rng, shape, dtype):
    return (rng.integers(0, 2, size=shape) * 2 - 1).astype(dtype)


def kl_normal(mean: Tensor, rho: Tensor, prior_sigma: float = PRIOR_SIGMA) -> Tensor:
    """Closed-form KL(N(mean, softplus(rho)^2) || N(0, prior_sigma^2)), summed."""
    mu, r = mean.data, rho.data
    sigma = np.logaddexp(0.0, r)
    var_p = prior_sigma * prior_sigma
    with np.errstate(divide="ignore"):
        value = (np.log(prior_sigma) - np.log(sigma) + (sigma * sigma + mu * mu) / (2.0 * var_p) - 0.5).sum()

    def back(g):
        dsig = -1.0 / sigma + sigma / var_p
        e = np.exp(-np.abs(r))
        dsp = np.where(r >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * mu / var_p, g * dsig * dsp)

    return _make(np.asarray(value, dtype=mu.dtype), (mean, rho), back)


def elbo_loss(task_loss, kl_total, dataset_size: int):
    """``task_loss + kl_total / dataset_size``."""
    if dataset_size <= 0:
        raise ValueError("dataset_size must be positive")
    return T.add(task_loss, T.mul(kl_total, 1.0 / dataset_size))


class _Flipout(Layer):
    prior_sigma = PRIOR_SIGMA

    def _make_variational(self, kshape, fan_in, nout, rng, dtype, init_stddev):
        rho0 = rho_for_stddev(init_stddev)
        self.params = {
            "kernel_mean": Tensor(he_uniform(rng, kshape, fan_in, dtype), requires_grad=True),
            "kernel_rho": Tensor(np.full(kshape, rho0, dtype=dtype), requires_grad=True),
            "bias_mean": Tensor(np.zeros(nout, dtype=dtype), requires_grad=True),
            "bias_rho": Tensor(np.full(nout, rho0, dtype=dtype), requires_grad=True),
        }

    def kl(self) -> Tensor:
        p = self.params
        return T.add(kl_normal(p["kernel_mean"], p["kernel_rho"], self.prior_sigma),
                     kl_normal(p["bias_mean"], p["bias_rho"], self.prior_sigma))

    def stddevs(self):
        return {k: np.logaddexp(0.0, self.params[k].data) for k in ("kernel_rho", "bias_rho")}

    def draw_noise(self, rng, batch, dtype):
        raise NotImplementedError

    def _noise(self, ctx, batch, dtype):
        if ctx.noise is not None and self.name in ctx.noise:
            return ctx.noise[self.name]
        if ctx.rng is None:
            return None
        noise = self.draw_noise(ctx.rng, batch, dtype)
        ctx.record[self.name] = noise
        return noise

    def _linear(self, x, w):
        raise NotImplementedError

    def forward(self, x, ctx):
        p = self.params
        mean_out = self._linear(x, p["kernel_mean"])
        noise = self._noise(ctx, x.shape[0], x.dtype)
        if noise is None:
            return T.add(mean_out, p["bias_mean"])
        kstd = T.softplus(p["kernel_rho"])
        delta = T.mul(kstd, noise["E"])
        pert = T.mul(self._linear(T.mul(x, noise["s"]), delta), noise["r"])
        bias = T.add(p["bias_mean"], T.mul(T.softplus(p["bias_rho"]), noise["eb"]))
        return T.add(T.add(mean_out, pert), bias)


@register_layer
class DenseFlipout(_Flipout):
    kind = "dense_flipout"

    def __init__(self, units, init_stddev=INIT_STDDEV):
        super().__init__()
        self.units = int(units)
        self.init_stddev = float(init_stddev)

    def infer(self, in_shape):
        return (self.units,)

    def build(self, in_shape, rng, dtype):
        out = super().build(in_shape, rng, dtype)
        self._make_variational((in_shape[0], self.units), in_shape[0], self.units, rng, dtype, self.init_stddev)
        return out

    def _linear(self, x, w):
        return T.matmul(x, w)

    def draw_noise(self, rng, batch, dtype):
        nin = self.in_shape[0]
        return {
            "E": rng.standard_normal((nin, self.units)).astype(dtype),
            "eb": rng.standard_normal(self.units).astype(dtype),
            "s": rademacher(rng, (batch, nin), dtype),
            "r": rademacher(rng, (batch, self.units), dtype),
        }

    def spec(self):
        return {"kind": self.kind, "units": self.units, "init_stddev": self.init_stddev}


@register_layer
class Conv2DFlipout(_Flipout):
    kind = "conv2d_flipout"

    def __init__(self, filters, kernel=(3, 3), stride=(1, 1), init_stddev=INIT_STDDEV):
        super().__init__()
        self.filters = int(filters)
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)
        self.init_stddev = float(init_stddev)

    def infer(self, in_shape):
        return conv_out_shape(self, in_shape)

    def build(self, in_shape, rng, dtype):
        out = super().build(in_shape, rng, dtype)
        kh, kw = self.kernel
        c = in_shape[2]
        self._make_variational((kh, kw, c, self.filters), kh * kw * c, self.filters, rng, dtype, self.init_stddev)
        return out

    def _linear(self, x, w):
        return T.conv2d(x, w, self.stride)

    def draw_noise(self, rng, batch, dtype):
        kh, kw = self.kernel
        c = self.in_shape[2]
        return {
            "E": rng.standard_normal((kh, kw, c, self.filters)).astype(dtype),
            "eb": rng.standard_normal(self.filters).astype(dtype),
            "s": rademacher(rng, (batch, 1, 1, c), dtype),
            "r": rademacher(rng, (batch, 1, 1, self.filters), dtype),
        }

    def spec(self):
        return {"kind": self.kind, "filters": self.filters, "kernel": list(self.kernel),
                "stride": list(self.stride), "init_stddev": self.init_stddev}


def network_kl(seq) -> Tensor | None:
    """Sum of KL terms over every flipout layer of a Sequential."""
    total = None
    for layer in seq.layers:
        if isinstance(layer, _Flipout):
            k = layer.kl()
            total = k if total is None else T.add(total, k)
    return total


def is_flipout(layer) -> bool:
    return isinstance(layer, _Flipout)
