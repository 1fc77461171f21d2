import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from flowcast import tensor as tc
from flowcast.gradcheck import finite_difference, max_relative_error
from flowcast.tensor import NonFiniteError, Tape, TapeError, Tensor


def tape_grads(fn, arrays_):
    ts = [Tensor(a, requires_grad=True) for a in arrays_]
    with Tape() as tape:
        out = fn(*ts)
    return tape.gradient(out, ts)


def fd_grads(fn, arrays_, step=1e-6):
    return finite_difference(lambda: fn(*[Tensor(a) for a in arrays_]).item(), arrays_, step)


def check(fn, *arrays_, tol=1e-6, step=1e-6):
    arrays_ = [np.array(a, dtype=float) for a in arrays_]
    assert max_relative_error(tape_grads(fn, arrays_), fd_grads(fn, arrays_, step)) < tol


UNARY = {
    "exp": lambda a: tc.exp(a).sum(),
    "log": lambda a: tc.log(a * a + 1.0).sum(),
    "sqrt": lambda a: tc.sqrt(a * a + 0.5).sum(),
    "tanh": lambda a: tc.tanh(a).sum(),
    "softplus": lambda a: (tc.softplus(a) * a).sum(),
    "elu": lambda a: (tc.elu(a) * a).sum(),
    "power": lambda a: tc.power(a * a + 1.0, 1.5).sum(),
    "square": lambda a: (tc.square(a) * a).sum(),
    "neg": lambda a: (-a * a).sum(),
    "mean": lambda a: (a * a).mean(),
    "softmax": lambda a: (tc.softmax(a, axis=-1) * tc.Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "transpose": lambda a: (a.transpose(1, 0) * tc.Tensor(np.arange(12.0).reshape(4, 3))).sum(),
    "reshape": lambda a: (a.reshape(2, 6) * tc.Tensor(np.arange(12.0).reshape(2, 6))).sum(),
    "getitem": lambda a: (a[1:, ::2] * a[1:, 1::2]).sum(),
    "fancy_index": lambda a: (a[[0, 0, 2], [1, 1, 3]] ** 2).sum(),
    "sum_axis": lambda a: (a.sum(axis=0) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_finite_differences(name, rng):
    check(UNARY[name], rng.standard_normal((3, 4)))


def test_relu_gradient_away_from_kink(rng):
    a = rng.standard_normal((3, 4))
    a[np.abs(a) < 0.1] = 0.5
    check(lambda x: (tc.relu(x) * x).sum(), a)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_broadcast_binary_gradients(op, rng):
    f = {"add": tc.add, "sub": tc.sub, "mul": tc.mul, "div": tc.div}[op]
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((3, 1)) + 3.0
    check(lambda x, y: (f(x, y) ** 2).sum(), a, b)


def test_matmul_concat_stack_broadcast(rng):
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))
    check(lambda x, y: ((x @ y) ** 2).sum(), a, b)
    check(lambda x, y: (tc.concat([x, x * y], axis=1) ** 2).sum(), a, a + 1)
    check(lambda x, y: (tc.stack([x, y], axis=0) ** 3).sum(), a, a - 1)
    check(lambda x: (tc.broadcast_to(x, (5, 3, 4)) * tc.Tensor(np.arange(60.).reshape(5, 3, 4))).sum(),
          rng.standard_normal((3, 4)))


def test_conv2d_gradients_all_inputs(rng):
    x = rng.standard_normal((2, 3, 6, 8))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.3
    b = rng.standard_normal(4)
    for stride in (1, 2):
        for mode in tc.PAD_MODES:
            # the loss is quadratic, so a large step is exact and avoids roundoff
            check(lambda x_, w_, b_: (tc.conv2d(x_, w_, b_, stride, mode) ** 2).sum(), x, w, b, step=1e-3)


def direct_conv(x, w, b, stride, pad_mode):
    """Loop oracle: explicit modular/reflected index arithmetic."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2

    def row(i):
        if pad_mode == "circular":
            return i % h
        i = abs(i)
        return 2 * (h - 1) - i if i >= h else i

    ho, wo = -(-h // stride), -(-wd // stride)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for a in range(kh):
                        for q in range(kw):
                            acc += w[o, c, a, q] * x[c, row(i * stride + a - ph), (j * stride + q - pw) % wd]
                out[o, i, j] = acc
    return out


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("pad_mode", tc.PAD_MODES)
@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_direct_loops(stride, pad_mode, k, rng):
    x = rng.standard_normal((2, 5, 7))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    got = tc.conv2d(x, w, b, stride, pad_mode).data
    np.testing.assert_allclose(got, direct_conv(x, w, b, stride, pad_mode), atol=1e-12)


def test_reflect_padding_counts_row_one_twice():
    # pad row -1 mirrors row 1, so a 3x3 box filter sees row 1 twice at output row 0
    x = np.zeros((1, 6, 8))
    x[0, 1, 3] = 1.0
    out = tc.conv2d(x, np.ones((1, 1, 3, 3))).data[0]
    assert out[0, 3] == 2.0
    assert out[2, 3] == 1.0
    x[0, 1, 3], x[0, 0, 3] = 0.0, 1.0
    assert tc.conv2d(x, np.ones((1, 1, 3, 3))).data[0][0, 3] == 1.0


def test_circular_longitude_wraps():
    x = np.zeros((1, 4, 6))
    x[0, 2, 0] = 1.0
    out = tc.conv2d(x, np.ones((1, 1, 3, 3))).data[0]
    assert out[2, 5] == 1.0 and out[2, 1] == 1.0


def test_sphere_pad_matches_numpy_pad(rng):
    x = rng.standard_normal((2, 5, 6))
    got = tc.sphere_pad(x, 2, 3, "circular_x_reflect_y").data
    want = np.pad(np.pad(x, ((0, 0), (2, 2), (0, 0)), mode="reflect"), ((0, 0), (0, 0), (3, 3)), mode="wrap")
    np.testing.assert_array_equal(got, want)
    got = tc.sphere_pad(x, 1, 1, "circular").data
    np.testing.assert_array_equal(got, np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="wrap"))


def test_sphere_pad_adjoint(rng):
    # <pad(x), y> == <x, pad^T(y)>
    x = rng.standard_normal((5, 6))
    y = rng.standard_normal((7, 10))
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = (tc.sphere_pad(xt, 1, 2) * Tensor(y)).sum()
    (g,) = tape.gradient(out, [xt])
    assert np.isclose(np.sum(tc.sphere_pad(x, 1, 2).data * y), np.sum(x * g), rtol=1e-13)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ValueError, match="odd"):
        tc.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="stride"):
        tc.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=0)
    with pytest.raises(ValueError, match="does not match"):
        tc.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 1, 3, 3)))


def test_stride_two_output_size_is_ceiling():
    assert tc.conv2d(np.zeros((1, 5, 7)), np.zeros((2, 1, 3, 3)), stride=2).shape == (2, 3, 4)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_values_raise():
    with pytest.raises(NonFiniteError):
        tc.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        tc.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_needs_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises((TapeError, ValueError)):
        tape.gradient(y, [x])


def test_unused_inputs_get_zero_gradient():
    x, z = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    gx, gz = tape.gradient(y, [x, z])
    np.testing.assert_array_equal(gx, 2 * np.ones(3))
    np.testing.assert_array_equal(gz, np.zeros(2))


def test_no_tape_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with tc.no_tape():
            y = x * 3.0
    assert not tape.records
    assert not y.requires_grad


def test_reused_node_accumulates_gradient():
    x = Tensor(np.array([1.5]), requires_grad=True)
    with Tape() as tape:
        y = (x * x * x + x).sum()
    (g,) = tape.gradient(y, [x])
    assert np.isclose(g[0], 3 * 1.5**2 + 1)


def test_dropout_modes(rng):
    x = Tensor(np.ones((100, 100)))
    assert tc.dropout(x, 0.5, None, training=False) is x
    y = tc.dropout(x, 0.25, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.75}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        tc.dropout(x, 0.5, None, training=True)


def test_softmax_rows_sum_to_one_and_handles_large_inputs():
    s = tc.softmax(Tensor([[1000.0, 1001.0, 999.0]]), axis=-1).data
    assert np.isclose(s.sum(), 1.0)


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_product_rule_property(a, b):
    ga, gb = tape_grads(lambda x, y: (x * y).sum(), [a, b])
    np.testing.assert_array_equal(ga, b)
    np.testing.assert_array_equal(gb, a)


@given(arrays(np.float64, (2, 4, 5), elements=finite), st.integers(0, 4))
def test_conv_is_equivariant_to_longitude_roll(x, shift):
    w = np.arange(2 * 2 * 9, dtype=float).reshape(2, 2, 3, 3) / 30.0
    a = tc.conv2d(np.roll(x, shift, axis=-1), w).data
    b = np.roll(tc.conv2d(x, w).data, shift, axis=-1)
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_invariant_to_shift(a):
    np.testing.assert_allclose(tc.softmax(Tensor(a)).data, tc.softmax(Tensor(a + 7.0)).data, atol=1e-12)
