import math

import numpy as np
import pytest

from biodg.autodiff import Pass, Sequential, Tensor
from biodg.bayes_layers import (INIT_STDDEV, PRIOR_SIGMA, Conv2DFlipout, DenseFlipout, elbo_loss, kl_normal,
                                network_kl, philox_rng, rho_for_stddev)


def test_constants_and_rho():
    assert PRIOR_SIGMA == 1.0 and INIT_STDDEV == 0.05
    assert math.isclose(np.logaddexp(0, rho_for_stddev(0.05)), 0.05)


def test_kl_closed_form_examples():
    # q == prior gives zero
    assert abs(float(kl_normal(Tensor(np.zeros(3)), Tensor(np.full(3, rho_for_stddev(1.0)))).data)) < 1e-12
    # KL(N(1, 0.5^2) || N(0, 1)) = -log 0.5 + (0.25 + 1)/2 - 0.5
    want = -math.log(0.5) + 1.25 / 2 - 0.5
    got = float(kl_normal(Tensor(np.array([1.0])), Tensor(np.array([rho_for_stddev(0.5)]))).data)
    assert math.isclose(got, want, rel_tol=1e-12)
    got2 = float(kl_normal(Tensor(np.array([0.0])), Tensor(np.array([rho_for_stddev(0.5)])), prior_sigma=2.0).data)
    assert math.isclose(got2, math.log(4.0) + 0.25 / 8 - 0.5, rel_tol=1e-12)


def test_elbo_examples():
    assert math.isclose(float(elbo_loss(Tensor(2.0), Tensor(10.0), 5).data), 4.0)
    with pytest.raises(ValueError):
        elbo_loss(Tensor(1.0), Tensor(1.0), 0)


def test_network_kl_sums_layers():
    net = Sequential([DenseFlipout(3), DenseFlipout(2)], "n")
    net.build((4,), np.random.default_rng(0), np.float64)
    total = sum(float(layer.kl().data) for layer in net.layers)
    assert math.isclose(float(network_kl(net).data), total)


def test_flipout_records_noise_and_replays():
    layer = Conv2DFlipout(2, (2, 2))
    layer.name = "c"
    layer.build((4, 4, 3), np.random.default_rng(0), np.float64)
    x = Tensor(np.random.default_rng(1).standard_normal((5, 4, 4, 3)))
    ctx = Pass(rng=philox_rng(3, 0))
    a = layer(x, ctx).data
    noise = ctx.record["c"]
    assert noise["s"].shape == (5, 1, 1, 3) and set(np.unique(noise["r"])) <= {-1.0, 1.0}
    b = layer(x, Pass(noise={"c": noise})).data
    assert np.array_equal(a, b)
    c = layer(x, Pass(rng=philox_rng(3, 0))).data
    assert np.array_equal(a, c)
    assert not np.array_equal(a, layer(x, Pass(rng=philox_rng(3, 1))).data)


def test_flipout_perturbation_differs_per_example():
    layer = DenseFlipout(3, init_stddev=0.5)
    layer.name = "d"
    layer.build((4,), np.random.default_rng(0), np.float64)
    x = Tensor(np.tile(np.random.default_rng(2).standard_normal(4), (64, 1)))
    out = layer(x, Pass(rng=philox_rng(0))).data
    assert len({tuple(r) for r in np.round(out, 12)}) > 1  # identical inputs, different signs


def test_spec_round_trip():
    layer = Conv2DFlipout(4, (3, 3), stride=(2, 2), init_stddev=0.1)
    from biodg.autodiff import layer_from_spec
    again = layer_from_spec(layer.spec())
    assert again.spec() == layer.spec()
