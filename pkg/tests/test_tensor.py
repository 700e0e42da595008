import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdistill.errors import ContractError, LabelError, NumericError, ShapeError
from trajdistill.tensor import (
    Tape,
    Tensor,
    backward,
    conv2d,
    finite_diff_grad,
    global_max_pool,
    grad,
    group_norm,
    linear,
    max_pool2d,
    ops,
    rel_err,
    relu,
    softmax_cross_entropy,
)

F64 = np.float64


def analytic(f, *arrays):
    with Tape() as tape:
        leaves = [tape.leaf(a, dtype=F64) for a in arrays]
        out = f(*leaves)
        gs = grad(tape, out, leaves)
    return [g.data for g in gs]


def weighted(f, w):
    """Reduce an op output to a scalar with fixed random weights."""
    return lambda *t: ops.sum(ops.mul(f(*t), Tensor(w)))


def check(f, *arrays, tol=1e-5):
    gs = analytic(f, *arrays)
    for k, a in enumerate(arrays):
        def fk(x, k=k):
            args = [Tensor(b, dtype=F64) for b in arrays]
            args[k] = x
            return f(*args)

        assert rel_err(gs[k], finite_diff_grad(fk, a.astype(F64))) <= tol


def jittered(rng, shape):
    """Uniform[-1, 1] values spaced apart so max-pool/relu avoid ties and kinks."""
    n = int(np.prod(shape))
    vals = np.linspace(-1, 1, n) + rng.uniform(-0.2, 0.2, n) / n
    return rng.permutation(vals).reshape(shape)


# ------------------------------------------------------------------- conv2d

def test_conv2d_valid_sum():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = conv2d(x, Tensor(np.ones((1, 1, 2, 2))), padding="valid")
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data.item() == 10.0


def test_conv2d_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(k), padding="same").data, x)


@pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid"), (2, 2)])
def test_conv2d_gradient_matches_finite_differences(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (2, 2, 6, 5))
    k = rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    out_shape = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding).shape
    w = rng.uniform(-1, 1, out_shape)
    check(weighted(lambda x, k, b: conv2d(x, k, b, stride=stride, padding=padding), w), x, k, b, tol=1e-6)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), padding="valid")


# ------------------------------------------------------------ cross-entropy

def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
    assert loss.item() == pytest.approx(np.log(7), abs=1e-6)
    assert np.log(7) == pytest.approx(1.945910, abs=1e-6)


def test_cross_entropy_saturated_correct():
    logits = np.zeros((2, 7))
    logits[0, 2] = logits[1, 5] = 1e6
    assert softmax_cross_entropy(Tensor(logits, dtype=F64), [2, 5]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(2)
    logits = rng.uniform(-1, 1, (5, 7))
    labels = rng.integers(0, 7, 5)
    check(lambda z: softmax_cross_entropy(z, labels), logits, tol=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# ----------------------------------------------------------------- backward

def test_backward_square():
    with Tape() as tape:
        x = tape.leaf(3.0, dtype=F64)
        (g,) = grad(tape, ops.mul(x, x), [x])
    assert g.item() == 6.0


def test_backward_product():
    with Tape() as tape:
        x = tape.leaf(2.0, dtype=F64)
        y = tape.leaf(5.0, dtype=F64)
        out = backward(tape, ops.mul(x, y))
    assert out[x.id].item() == 5.0 and out[y.id].item() == 2.0


def test_backward_rejects_non_scalar_root():
    with Tape() as tape:
        x = tape.leaf(np.ones(3))
        with pytest.raises(ContractError):
            backward(tape, ops.mul(x, x))


def _inner_step_objective(s0, theta0, alpha, target, want_grad=False):
    """||theta - alpha * dL/dtheta(s; theta) - target||^2 for a 2-parameter logistic model."""
    with Tape() as tape:
        s = tape.leaf(s0, dtype=F64)
        theta = tape.leaf(theta0, dtype=F64)
        logits = ops.mul(s, ops.reshape(theta, (1, 2)))
        loss = softmax_cross_entropy(logits, [0, 1, 1])
        (g,) = grad(tape, loss, [theta], create_graph=True)
        d = ops.sub(ops.sub(theta, ops.scale(g, alpha)), Tensor(target))
        val = ops.sum(ops.mul(d, d))
        if want_grad:
            (gs,) = grad(tape, val, [s])
            return gs.data
    return val


def test_second_order_through_inner_gradient():
    rng = np.random.default_rng(3)
    s0 = rng.uniform(-1, 1, (3, 2))
    theta0, target, alpha = np.array([0.3, -0.7]), np.array([0.1, 0.2]), 0.5
    gs = _inner_step_objective(s0, theta0, alpha, target, want_grad=True)
    fd = finite_diff_grad(lambda t: _inner_step_objective(t.data, theta0, alpha, target), s0)
    assert rel_err(gs, fd) <= 1e-4
    assert np.abs(gs).max() > 1e-3  # the second-order path is actually exercised


# ---------------------------------------------------------- finite_diff_grad

def test_finite_diff_of_sum_is_ones():
    x = np.random.default_rng(4).standard_normal((3, 2))
    np.testing.assert_allclose(finite_diff_grad(lambda t: ops.sum(t), x), np.ones((3, 2)), atol=1e-8)


def test_finite_diff_of_squared_norm():
    fd = finite_diff_grad(lambda t: ops.sum(ops.mul(t, t)), np.array([1.0, 2.0]), eps=1e-6)
    np.testing.assert_allclose(fd, [2.0, 4.0], atol=1e-6)


def test_finite_diff_agrees_with_backward_on_two_layer_net():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (4, 3))
    w1, w2 = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (3, 5))
    b1 = rng.uniform(-1, 1, 5)
    labels = [0, 2, 1, 2]

    def f(w1, b1, w2):
        return softmax_cross_entropy(linear(relu(linear(Tensor(x, dtype=F64), w1, b1)), w2), labels)

    check(f, w1, b1, w2, tol=1e-6)


# --------------------------------------------------------- the rest of the op set

def test_every_op_gradient_at_f64():
    rng = np.random.default_rng(6)
    x4 = jittered(rng, (2, 4, 6, 6))
    cases = [
        (relu, x4),
        (lambda t: max_pool2d(t, 2), x4),
        (lambda t: max_pool2d(t, 3, 2), x4),
        (global_max_pool, x4),
        (lambda t: group_norm(t, 2), x4),
        (lambda t: ops.scale(t, -2.5), x4),
        (ops.exp, x4),
        (lambda t: ops.log(ops.add(t, 2.0)), x4),
        (lambda t: ops.power(ops.add(t, 2.0), 1.5), x4),
    ]
    for f, a in cases:
        w = rng.uniform(-1, 1, f(Tensor(a)).shape)
        check(weighted(f, w), a)
    a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))
    for f in (ops.add, ops.sub, ops.mul, lambda p, q: ops.div(p, ops.add(q, 3.0))):
        check(weighted(f, rng.uniform(-1, 1, (3, 4))), a, b)
    gamma, beta = rng.uniform(0.5, 1.5, 4), rng.uniform(-1, 1, 4)
    w = rng.uniform(-1, 1, x4.shape)
    check(weighted(lambda t, g, bb: group_norm(t, 2, g, bb), w), x4, gamma, beta)
    xw = rng.uniform(-1, 1, (3, 5))
    check(weighted(lambda t, W, bb: linear(t, W, bb), rng.uniform(-1, 1, (3, 2))), xw, rng.uniform(-1, 1, (2, 5)), rng.uniform(-1, 1, 2))


def test_max_pool_ties_route_to_first_index():
    x = np.ones((1, 1, 2, 2))
    with Tape() as tape:
        t = tape.leaf(x, dtype=F64)
        (g,) = grad(tape, ops.sum(max_pool2d(t, 2)), [t])
    np.testing.assert_array_equal(g.data, [[[[1.0, 0.0], [0.0, 0.0]]]])


# --------------------------------------------------------------- properties

@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, 6)

    def f(t):
        return ops.sum(ops.exp(ops.scale(t, 0.5)))

    def g(t):
        return ops.sum(ops.mul(t, t))

    (combo,) = analytic(lambda t: ops.add(ops.scale(f(t), a), ops.scale(g(t), b)), x0)
    (gf,) = analytic(f, x0)
    (gg,) = analytic(g, x0)
    np.testing.assert_allclose(combo, a * gf + b * gg, rtol=0, atol=1e-12)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_tape_replay_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    x0, k0 = rng.standard_normal((2, 1, 6, 5)), rng.standard_normal((2, 1, 3, 3))
    with Tape() as tape:
        x, k = tape.leaf(x0), tape.leaf(k0)
        out = ops.sum(relu(max_pool2d(conv2d(x, k), 2)))
        g1 = backward(tape, out)
    values = tape.replay()
    assert values[out.id].tobytes() == out.data.tobytes()
    with Tape() as tape2:
        x2, k2 = tape2.leaf(x0), tape2.leaf(k0)
        out2 = ops.sum(relu(max_pool2d(conv2d(x2, k2), 2)))
        g2 = backward(tape2, out2)
    assert out2.data.tobytes() == out.data.tobytes()
    assert g2[x2.id].data.tobytes() == g1[x.id].data.tobytes()
    assert g2[k2.id].data.tobytes() == g1[k.id].data.tobytes()


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        ops.exp(Tensor(np.array([1000.0], dtype=np.float32)))
    with pytest.raises(NumericError):
        ops.log(Tensor(np.array([0.0])))


def test_unreachable_leaf_gets_zero_gradient():
    with Tape() as tape:
        x, y = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
        out = backward(tape, ops.sum(x))
    np.testing.assert_array_equal(out[y.id].data, np.zeros(3))
