import numpy as np
import pytest

from biodg.autodiff import (Adam, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential, Softmax, Tensor,
                            assign_params, bce_loss, cce_loss, combined_loss, layer_from_spec, load_checkpoint,
                            no_grad, save_checkpoint, triplet_loss)
from biodg.autodiff import tensor as T
from biodg.errors import ConfigError, DivergenceError, NormalizationError, ShapeError, StateError

import gradcheck as G


def _conv_oracle(x, w, b, stride):
    n, h, wd, c = x.shape
    kh, kw, _, f = w.shape
    sh, sw = stride
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    out = np.zeros((n, ho, wo, f))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, i * sh:i * sh + kh, j * sw:j * sw + kw, :]
            for k in range(f):
                out[:, i, j, k] = (patch * w[..., k]).sum(axis=(1, 2, 3)) + b[k]
    return out


@pytest.mark.parametrize("stride", [(1, 1), (2, 2), (1, 3)])
def test_conv2d_matches_brute_force(stride):
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 7, 9, 3)), rng.standard_normal((3, 2, 3, 4)), rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), stride, bias=Tensor(b)).data
    assert np.allclose(out, _conv_oracle(x, w, b, stride), atol=1e-12)


def test_max_pool_drops_remainder_and_routes_first_max():
    x = Tensor(np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 5.0], [9.0, 9.0, 9.0]])[None, :, :, None], requires_grad=True)
    out = T.max_pool2d(x)
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 1.0
    T.sum_all(out).backward()
    assert x.grad[0, :, :, 0].tolist() == [[1, 0, 0], [0, 0, 0], [0, 0, 0]]


def test_broadcast_add_and_matmul_grads():
    rng = np.random.default_rng(1)
    err = G.check(lambda a, b, c: T.sum_all(T.square(T.add(T.matmul(a, b), c))),
                  [rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)])
    assert err < G.TOL
    err = G.check(lambda a: T.sum_all(T.softplus(T.mul(T.log(T.sigmoid(a)), 2.0))), [rng.standard_normal(5)])
    assert err < G.TOL
    err = G.check(lambda a, b: T.sum_all(T.mul(T.concat([a, b]), T.take_rows(T.concat([b, a]), [0, 0, 1]))),
                  [rng.standard_normal((3, 2)), rng.standard_normal((3, 2))])
    assert err < G.TOL


def test_backward_state_errors():
    a = Tensor(np.ones(3), requires_grad=True)
    loss = T.sum_all(T.mul(a, 2.0))
    loss.backward()
    assert np.array_equal(a.grad, [2, 2, 2])
    with pytest.raises(StateError):
        loss.backward()
    with pytest.raises(StateError):
        T.sum_all(Tensor(np.ones(2))).backward()
    with pytest.raises(ShapeError):
        T.mul(a, 1.0).backward()
    with no_grad():
        assert not T.mul(a, 3.0).requires_grad


def test_loss_values():
    p = Tensor(np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]))
    assert np.isclose(cce_loss(p, [0, 2]).data, -(np.log(0.7) + np.log(0.8)) / 2)
    assert np.isclose(cce_loss(p, np.eye(3)[[0, 2]]).data, cce_loss(p, [0, 2]).data)
    with pytest.raises(NormalizationError):
        cce_loss(Tensor(np.array([[0.5, 0.6]])), [0])
    q = Tensor(np.array([0.9, 0.2, 0.0]))
    want = -(np.log(0.9) + np.log(0.8) + np.log(1 - 1e-7)) / 3
    assert np.isclose(bce_loss(q, [1, 0, 0]).data, want)
    a, pos, neg = Tensor(np.zeros((2, 2))), Tensor(np.array([[1.0, 0], [0, 0.5]])), Tensor(np.array([[0, 3.0], [0, 1]]))
    assert np.isclose(triplet_loss(a, pos, neg, 1.0).data, (0 + 0.5) / 2)
    c = combined_loss(Tensor(np.array(2.0)), Tensor(np.array(3.0)), 0.9, 0.1)
    assert np.isclose(c.data, 2.1)
    with pytest.raises(ValueError):
        combined_loss(Tensor(1.0), Tensor(1.0), -1, 1)


def test_adam_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.3])
    m = v = np.zeros(2)
    want = p.data.copy()
    for t, g in enumerate((g1, g2), start=1):
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        want = want - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, want, atol=1e-12)
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(DivergenceError, match="step 3"):
        opt.step()


def test_sequential_shapes_and_specs():
    net = Sequential([Conv2D(4, (3, 3), stride=(2, 2)), ReLU(), MaxPool2D((2, 2)), Flatten(), Dense(5), Softmax()])
    out = net.build((26, 99, 1), np.random.default_rng(0))
    assert out == (5,)
    y = net(np.zeros((2, 26, 99, 1), np.float32))
    assert y.shape == (2, 5) and np.allclose(y.data.sum(axis=1), 1)
    with pytest.raises(ShapeError):
        net(np.zeros((2, 20, 99, 1), np.float32))
    rebuilt = Sequential([layer_from_spec(s) for s in net.specs()])
    assert rebuilt.build((26, 99, 1), np.random.default_rng(0)) == out
    with pytest.raises(ConfigError):
        layer_from_spec({"kind": "lstm"})
    with pytest.raises(ShapeError):
        Sequential([Conv2D(1, (5, 5))]).build((3, 3, 1), np.random.default_rng(0))


def test_checkpoint_round_trip(tmp_path):
    net = Sequential([Flatten(), Dense(3)], "n")
    net.build((2, 2), np.random.default_rng(0))
    net.layers[1].params["bias"].data[:] = [1.5, -2.0, 0.25]
    save_checkpoint(tmp_path / "m", {"kind": "test"}, net.named_params())
    desc, values = load_checkpoint(tmp_path / "m")
    assert desc["kind"] == "test" and desc["n_values"] == 4 * 3 + 3
    other = Sequential([Flatten(), Dense(3)], "n")
    other.build((2, 2), np.random.default_rng(9))
    assign_params(other.named_params(), values)
    for (_, a), (_, b) in zip(net.named_params(), other.named_params()):
        assert np.array_equal(a.data, b.data)
    values["n.1.dense.bias"] = np.zeros(4, np.float32)
    with pytest.raises(ConfigError):
        assign_params(other.named_params(), values)
    (tmp_path / "m.ckpt.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "m")
