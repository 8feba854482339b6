import numpy as np
import pytest

from sparsebound.arch import LayerSpec, binary_tree, build_dag, conv_arch, random_dag
from sparsebound.tensor import (
    ShapeError,
    WeightSet,
    backward,
    dump_weights,
    forward,
    live_mask,
    load_weights,
    loss_and_grad,
    mse_loss,
    parse_weights,
    random_weights,
    relu,
    save_weights,
    unshare,
    zero_weights,
)


def random_net(seed, L=None, shared=False, bias=False):
    rng = np.random.default_rng(seed)
    L = L or int(rng.integers(1, 5))
    g = random_dag(rng, L, max_width=5, max_deg=3, channels=[int(rng.integers(1, 3)) for _ in range(L)] + [2], shared=shared)
    if bias:
        from dataclasses import replace

        g = replace(g, bias=(True,) * g.L)
    return g, random_weights(g, rng), rng


def finite_difference_check(g, w, x, t, h=1e-6):
    _, grad, _ = loss_and_grad(g, w, x, t)
    flat = w.flat()
    live = live_mask(g)
    num = np.zeros_like(flat)
    for i in np.flatnonzero(live):
        e = np.zeros_like(flat)
        e[i] = h
        up = mse_loss(forward(g, w.with_flat(flat + e), x)[0], t)
        dn = mse_loss(forward(g, w.with_flat(flat - e), x)[0], t)
        num[i] = (up - dn) / (2 * h)
    ana = grad.flat()
    return np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12)


def test_relu_and_mse():
    np.testing.assert_array_equal(relu(np.array([-1.0, 2.0])), [0.0, 2.0])
    assert mse_loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])) == 0.0
    # squared Euclidean distance summed over logits, averaged over the batch
    assert mse_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 2.0
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_zero_weights_give_zero_output():
    g = binary_tree(3, channels=[2, 3, 3, 2])
    out, _ = forward(g, zero_weights(g), np.ones((2, 8)))
    np.testing.assert_array_equal(out, [0.0, 0.0])


def test_identity_chain_passes_positive_input():
    g = build_dag([1, 1, 1, 1], [1, 1, 1, 1], [[[0]]] * 3)
    w = WeightSet([np.ones((1, 1, 1))] * 3)
    x = np.array([[0.7]])
    out, trace = forward(g, w, x)
    assert out[0] == 0.7
    assert all((p >= 0).all() for p in trace.post if p is not None)


def test_forward_rejects_bad_input():
    g = binary_tree(2)
    w = random_weights(g, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(g, w, np.ones((1, 3)))
    with pytest.raises(ValueError):
        forward(g, w, np.array([[np.nan, 0, 0, 0]]))


def toeplitz_forward(x, W1, W2, k, stride, c0, c1):
    """Dense-matrix evaluation of a 1-D conv followed by a fully-connected layer."""
    n = x.shape[1]
    P = (n - k) // stride + 1
    T = np.zeros((P * c1, n * c0))
    for p in range(P):
        for o in range(c1):
            for b in range(k):
                for i in range(c0):
                    T[p * c1 + o, (p * stride + b) * c0 + i] = W1[o, b * c0 + i]
    h = np.maximum(T @ x.T.ravel(), 0.0)
    return W2 @ h


@pytest.mark.parametrize("seed", range(20))
def test_shared_conv_equals_toeplitz(seed):
    rng = np.random.default_rng(seed)
    c0, c1, c2 = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    # stride > kernel skips pixels
    g = conv_arch(
        (c0, 1, 8), [LayerSpec("conv", (1, k), (1, stride), 0, c1), LayerSpec("fc", out_channels=c2)], allow_dead=True
    )
    w = random_weights(g, rng)
    x = rng.standard_normal((c0, 8))
    out, _ = forward(g, w, x)
    ref = toeplitz_forward(x, w.layers[0], w.layers[1], k, stride, c0, c1)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_shared_equals_unshared_copy(seed):
    rng = np.random.default_rng(seed)
    g = conv_arch((2, 6, 6), [LayerSpec("conv", 3, 1, 1, 3), LayerSpec("conv", 2, 2, 0, 2), LayerSpec("fc", out_channels=2)])
    w = random_weights(g, rng)
    gu, wu = unshare(g, w)
    x = rng.standard_normal((4, 2, 36))
    np.testing.assert_allclose(forward(g, w, x)[0], forward(gu, wu, x)[0], rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_positive_homogeneity_per_layer(seed):
    g, w, rng = random_net(seed)
    x = rng.standard_normal((3, g.channels[0], g.widths[0]))
    l = int(rng.integers(0, g.L))
    c = float(rng.uniform(0.1, 5.0))
    factors = [1.0] * g.L
    factors[l] = c
    np.testing.assert_allclose(forward(g, w.scaled(factors), x)[0], c * forward(g, w, x)[0], rtol=1e-10, atol=1e-12)
    # no biases: f(alpha x) = alpha f(x)
    np.testing.assert_allclose(forward(g, w, 2.5 * x)[0], 2.5 * forward(g, w, x)[0], rtol=1e-10, atol=1e-12)


def test_zero_upstream_gives_zero_gradient():
    g, w, rng = random_net(3)
    _, trace = forward(g, w, rng.standard_normal((2, g.channels[0], g.widths[0])))
    grad = backward(g, w, trace, np.zeros((2, g.channels[-1])))
    assert all(not a.any() for a in grad.layers)


def test_linear_layer_gradient_closed_form():
    rng = np.random.default_rng(11)
    g = build_dag([1, 1], [3, 2], [[[0]]])
    W = rng.standard_normal((1, 2, 3))
    X = rng.standard_normal((5, 3, 1))
    Y = rng.standard_normal((5, 2))
    _, grad, _ = loss_and_grad(g, WeightSet([W]), X, Y)
    Xm = X[:, :, 0]
    expected = 2.0 * (Xm @ W[0].T - Y).T @ Xm / 5
    np.testing.assert_allclose(grad.layers[0][0], expected, rtol=1e-12)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("shared, bias", [(False, False), (True, False), (False, True)])
def test_gradient_matches_finite_differences(seed, shared, bias):
    g, w, rng = random_net(seed, shared=shared, bias=bias)
    x = rng.standard_normal((4, g.channels[0], g.widths[0]))
    t = rng.standard_normal((4, g.channels[-1]))
    assert finite_difference_check(g, w, x, t) <= 1e-5


def test_weight_container_round_trip(tmp_path):
    g, w, _ = random_net(5)
    blob = dump_weights(w)
    assert blob[:8] == b"SPBWGT\x00\x01"
    w2 = parse_weights(blob)
    for a, b in zip(w.layers, w2.layers):
        np.testing.assert_array_equal(a, b)
    save_weights(tmp_path / "w.bin", w, {"note": "x"})
    assert (tmp_path / "w.bin.json").exists()
    w3 = load_weights(tmp_path / "w.bin", g)
    assert np.array_equal(w3.flat(), w.flat())


def test_weight_container_errors():
    g, w, _ = random_net(5)
    blob = dump_weights(w)
    with pytest.raises(ValueError):
        parse_weights(b"NOTMAGIC" + blob[8:])
    with pytest.raises(ValueError):
        parse_weights(blob[:-3])
    with pytest.raises(ValueError):
        parse_weights(blob + b"\x00")
