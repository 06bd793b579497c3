import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ddgnet import numerics as nx
from ddgnet.numerics import ContractError, ShapeError, Tape, finite_diff_check


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    b = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nx.matmul(np.eye(2), b), b)


def test_matmul_hand_example():
    assert np.array_equal(nx.matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(nx.matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_input_rejected():
    with pytest.raises(ContractError):
        nx.as_matrix([[1.0, np.nan]])


small = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
               elements=st.floats(-1, 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n)), rng.uniform(-1, 1, (n, p))
    left = nx.matmul(nx.matmul(a, b), c)
    right = nx.matmul(a, nx.matmul(b, c))
    assert np.max(np.abs(left - right)) <= 1e-9


def test_backward_square():
    t = Tape()
    x = t.param("x", [[3.0]])
    grads = t.backward(x * x)
    assert grads["x"][0, 0] == pytest.approx(6.0)


def test_backward_unused_parameter_is_zero():
    t = Tape()
    x = t.param("x", [[2.0]])
    unused = t.param("p", np.ones((2, 2)))
    grads = t.backward(x * x)
    assert np.array_equal(grads["p"], np.zeros((2, 2)))
    assert unused.shape == (2, 2)


def test_backward_rejects_non_scalar():
    t = Tape()
    x = t.param("x", np.ones((2, 1)))
    with pytest.raises(ContractError):
        t.backward(x * 2.0)


def test_gradient_shapes_match_parameters():
    rng = np.random.default_rng(1)
    t = Tape()
    w = t.param("w", rng.standard_normal((3, 4)))
    b = t.param("b", rng.standard_normal((3, 1)))
    x = t.const(rng.standard_normal((4, 5)))
    grads = t.backward(nx.vsum(nx.sigmoid(w @ x + b)))
    assert grads["w"].shape == (3, 4) and grads["b"].shape == (3, 1)


def test_sigmoid_layer_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 3))

    def loss(tape, p):
        return nx.vsum(nx.sigmoid(p["W"] @ tape.const(x)))

    err = finite_diff_check(loss, {"W": 0.3 * rng.standard_normal((2, 4))}, eps=1e-5)
    assert err <= 1e-4


def test_finite_diff_quadratic():
    def loss(tape, p):
        return nx.vsum(p["a"] * p["a"])

    assert finite_diff_check(loss, {"a": np.array([[0.5, -1.5], [2.0, 0.25]])}) <= 1e-6


def test_finite_diff_constant_loss():
    def loss(tape, p):
        return tape.const(np.array([[4.0]])) + nx.vsum(p["a"]) * 0.0

    assert finite_diff_check(loss, {"a": np.ones((2, 2))}) == 0.0


def test_finite_diff_never_raises():
    def loss(tape, p):
        raise RuntimeError("boom")

    assert finite_diff_check(loss, {"a": np.ones((1, 1))}) == float("inf")


def test_finite_diff_detects_corrupted_gradient():
    def loss(tape, p):
        return nx.vsum(p["a"] * p["a"])

    def corrupt(g):
        return {"a": g["a"] * 1.1}

    assert finite_diff_check(loss, {"a": np.ones((2, 2))}, grad_hook=corrupt) > 1e-3


UNARY = {
    "sigmoid": nx.sigmoid,
    "leaky_relu": lambda v: nx.leaky_relu(v, 0.2),
    "exp": nx.exp,
    "log": lambda v: nx.log(v * v + 0.5),
    "neg": nx.neg,
    "scale": lambda v: nx.scale(v, -2.5),
    "mean_rows": lambda v: nx.mean(v, axis=1),
    "sum_cols": lambda v: nx.vsum(v, axis=0),
    "log_softmax": lambda v: nx.log_softmax(v, axis=0),
    "col_norm": nx.col_norm,
    "take_cols": lambda v: nx.take_cols(v, [2, 0, 0]),
    "index": lambda v: nx.index(v, (np.array([[0], [1]]), np.array([[1, 2], [0, 0]]))),
    "patches": lambda v: nx.temporal_patches(v, 3),
    "concat": lambda v: nx.concat([v, v * 2.0], axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_elementary_gradient(name):
    rng = np.random.default_rng(sorted(UNARY).index(name))
    op = UNARY[name]
    x = rng.uniform(-1, 1, (2, 3))
    if name == "leaky_relu":
        # keep probes away from the kink
        x[np.abs(x) < 0.05] = 0.3
    out_shape = op(Tape().const(x)).shape
    # random readout so every output entry carries a distinct weight
    readout = rng.uniform(-1, 1, out_shape)

    def loss(tape, p):
        return nx.vsum(op(p["x"]) * tape.const(readout))

    assert finite_diff_check(loss, {"x": x}, eps=1e-6) <= 1e-4


@pytest.mark.parametrize("name", ["add", "mul", "matmul", "conv1d"])
def test_binary_gradient(name):
    rng = np.random.default_rng(7)
    a = rng.uniform(-1, 1, (3, 4))
    if name == "matmul":
        b = rng.uniform(-1, 1, (4, 2))
    elif name == "conv1d":
        b = rng.uniform(-1, 1, (2, 3 * 3))
    else:
        b = rng.uniform(-1, 1, (3, 1))
    bias = rng.uniform(-1, 1, (2, 1))

    def loss(tape, p):
        if name == "add":
            out = p["a"] + p["b"]
        elif name == "mul":
            out = p["a"] * p["b"]
        elif name == "matmul":
            out = p["a"] @ p["b"]
        else:
            out = nx.conv1d(p["a"], p["b"], p["bias"], 3)
        return nx.vsum(nx.sigmoid(out))

    params = {"a": a, "b": b}
    if name == "conv1d":
        params["bias"] = bias
    assert finite_diff_check(loss, params, eps=1e-6) <= 1e-4


def test_conv1d_matches_direct_convolution():
    rng = np.random.default_rng(3)
    D, T, out, k = 3, 7, 2, 3
    x = rng.standard_normal((D, T))
    w = rng.standard_normal((out, D * k))
    b = rng.standard_normal((out, 1))
    t = Tape()
    got = nx.conv1d(t.const(x), t.const(w), t.const(b), k).value
    padded = np.pad(x, ((0, 0), (1, 1)))
    wk = w.reshape(out, k, D)
    want = np.zeros((out, T))
    for s in range(T):
        want[:, s] = np.einsum("okd,dk->o", wk, padded[:, s : s + k]) + b[:, 0]
    np.testing.assert_allclose(got, want, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(small)
def test_col_norm_nonnegative(x):
    t = Tape()
    assert np.all(nx.col_norm(t.const(x)).value >= 0)
