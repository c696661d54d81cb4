import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from duet.tensor import (Graph, ShapeError, decode_dtf, encode_dtf, evaluate, forward, gradients, load_dtf,
                         save_dtf)
from oracles import finite_difference, random_conv_graph


def run(graph, node, bindings):
    return forward(graph, bindings)[node]


def test_relu_forward():
    g = Graph()
    x = g.leaf("x")
    y = g.relu(x)
    assert run(g, y, {x: np.array([-1.0, 0.0, 2.0])}).tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_at_zero():
    g = Graph()
    x = g.leaf("x")
    assert run(g, g.sigmoid(x), {x: np.array([0.0])}).tolist() == [0.5]


def test_identity_kernel_conv_returns_input():
    g = Graph()
    x, w = g.leaf("x"), g.leaf("w")
    y = g.conv2d(x, w, padding=1)
    img = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(run(g, y, {x: img, w: k}), img)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 2, 3, 3))
    g = Graph()
    xl, wl = g.leaf("x"), g.leaf("w")
    for stride, pad, dil in [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)]:
        got = run(g, g.conv2d(xl, wl, stride=stride, padding=pad, dilation=dil), {xl: x, wl: w})
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = (7 + 2 * pad - dil * 2 - 1) // stride + 1
        want = np.zeros((4, 3, ho, ho))
        for o in range(4):
            for n in range(3):
                for i in range(ho):
                    for j in range(ho):
                        for c in range(2):
                            for a in range(3):
                                for b in range(3):
                                    want[o, n, i, j] += w[o, c, a, b] * xp[c, n, i * stride + a * dil, j * stride + b * dil]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_grad_of_mean_square():
    g = Graph()
    x = g.leaf("x")
    loss = g.mean(x * x)
    grads = gradients(g, loss, [x], {x: np.array([1.0, 2.0])})
    np.testing.assert_allclose(grads[x], [1.0, 2.0])


def test_grad_of_sigmoid_product():
    g = Graph()
    w, x = g.leaf("w"), g.leaf("x")
    loss = g.sum(g.sigmoid(w * x))
    grads = gradients(g, loss, [w], {w: np.array(0.0), x: np.array(3.0)})
    assert grads[w] == pytest.approx(0.75, abs=1e-15)


def test_random_graphs_match_finite_differences():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(25):
        g, loss, wrt, bindings, terms = random_conv_graph(rng)
        grads = gradients(g, loss, wrt, bindings)
        for leaf in wrt:
            fd = finite_difference(g, loss, leaf, bindings, terms=terms)
            worst = max(worst, float(np.max(np.abs(grads[leaf] - fd) / (np.abs(fd) + 1e-8))))
    assert worst < 1e-4


def _elementwise_graph(op):
    g = Graph()
    a, b = g.leaf("a"), g.leaf("b")
    nodes = {
        "div": lambda: a / (g.exp(b) + 1.0),
        "log": lambda: g.log(g.exp(a) + g.exp(b)),
        "logaddexp": lambda: g.logaddexp(a, b),
        "clamp": lambda: g.clamp(a, -0.5, 0.5) * b,
        "matmul": lambda: g.reshape(a, (3, 4)) @ g.reshape(b, (4, 3)),
        "concat": lambda: g.concat([a, b * b], axis=0),
        "transpose": lambda: g.transpose(g.reshape(a, (3, 4)), (1, 0)) * g.reshape(b, (4, 3)),
        "logsumexp": lambda: g.logsumexp(g.reshape(a - b, (3, 4)), axis=1),
        "sub_neg": lambda: -(a - b * 2.0),
        "mean_axis": lambda: g.mean(g.reshape(a * b, (3, 4)), axis=0, keepdims=True),
    }
    out = nodes[op]()
    r = g.constant(np.linspace(-1, 1, forward(g, {a: np.ones(12), b: np.ones(12)})[out].size).reshape(
        forward(g, {a: np.ones(12), b: np.ones(12)})[out].shape))
    terms = out * r
    return g, g.sum(terms), (a, b), terms


@pytest.mark.parametrize("op", ["div", "log", "logaddexp", "clamp", "matmul", "concat", "transpose",
                                "logsumexp", "sub_neg", "mean_axis"])
def test_other_primitives_match_finite_differences(op):
    g, loss, (a, b), terms = _elementwise_graph(op)
    rng = np.random.default_rng(7)
    bindings = {a: rng.uniform(-2, 2, 12), b: rng.uniform(-2, 2, 12)}
    if op == "clamp":
        # keep clear of the kinks
        bindings[a] = np.where(np.abs(np.abs(bindings[a]) - 0.5) < 0.05, 0.0, bindings[a])
    grads = gradients(g, loss, [a, b], bindings)
    for leaf in (a, b):
        fd = finite_difference(g, loss, leaf, bindings, terms=terms)
        np.testing.assert_allclose(grads[leaf], fd, rtol=1e-6, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, 6, elements=st.floats(-3, 3)), st.floats(-5, 5))
def test_gradients_are_linear_in_the_loss(x, scale):
    g = Graph()
    xl = g.leaf("x")
    base = g.sum(g.softplus(xl) * g.sigmoid(xl))
    scaled = base * scale
    g1 = gradients(g, base, [xl], {xl: x})[xl]
    g2 = gradients(g, scaled, [xl], {xl: x})[xl]
    np.testing.assert_allclose(g2, scale * g1, rtol=1e-12, atol=1e-12)


def test_forward_backward_bit_identical():
    rng = np.random.default_rng(3)
    g, loss, wrt, bindings, _ = random_conv_graph(rng)
    a = gradients(g, loss, wrt, bindings)
    b = gradients(g, loss, wrt, bindings)
    for leaf in wrt:
        assert np.array_equal(a[leaf], b[leaf])


def test_upsample_is_nearest_neighbour():
    g = Graph()
    x = g.leaf("x")
    out = run(g, g.upsample2x(x), {x: np.arange(4.0).reshape(1, 1, 2, 2)})
    assert out[0, 0].tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


def test_unreachable_leaf_gets_zero_gradient():
    g = Graph()
    x, y = g.leaf("x"), g.leaf("y")
    loss = g.sum(x * x)
    grads = gradients(g, loss, [x, y], {x: np.ones(3), y: np.ones(2)})
    assert grads[y].tolist() == [0.0, 0.0]


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.leaf("x")
    with pytest.raises(ShapeError):
        gradients(g, x * 2.0, [x], {x: np.ones(3)})


def test_shape_error_names_the_node():
    g = Graph()
    x, w = g.leaf("x"), g.leaf("w")
    g.conv2d(x, w, name="bad_conv")
    with pytest.raises(ShapeError, match="bad_conv"):
        forward(g, {x: np.ones((3, 1, 4, 4)), w: np.ones((2, 2, 3, 3))})


def test_unbound_leaf_is_reported():
    g = Graph()
    x = g.leaf("x")
    with pytest.raises(KeyError, match="x"):
        evaluate(g, {}, [x + 1.0])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=False, allow_infinity=True)))
def test_dtf_round_trip(arr):
    back = decode_dtf(encode_dtf(arr))
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_dtf_layout(tmp_path):
    arr = np.array([[1.0, 2.0, 3.0]])
    path = tmp_path / "t.dtf"
    save_dtf(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"DTF1"
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:16] == (1).to_bytes(8, "little") and raw[16:24] == (3).to_bytes(8, "little")
    assert len(raw) == 24 + 3 * 8
    np.testing.assert_array_equal(load_dtf(path), arr)


def test_dtf_rejects_bad_magic_and_truncation():
    buf = encode_dtf(np.ones(3))
    with pytest.raises(ValueError):
        decode_dtf(b"XXXX" + buf[4:])
    with pytest.raises(ValueError):
        decode_dtf(buf[:-1])
