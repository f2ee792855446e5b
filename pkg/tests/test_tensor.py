import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ereformer import tensor as T
from ereformer.gradcheck import grad_check, numeric_grad
from ereformer.tensor import Tensor, Tape


def test_matmul_identity_and_hand_case():
    out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    assert T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_grad_rel_err(f64, rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    assert grad_check(lambda: (T.matmul(a, b) * w).sum(), [a, b]) <= 1e-6


def test_batched_matmul_broadcast_grad(f64, rng):
    a = Tensor(rng.standard_normal((2, 3, 4, 5)))
    b = Tensor(rng.standard_normal((5, 2)))
    w = rng.standard_normal((2, 3, 4, 2))
    assert grad_check(lambda: (T.matmul(a, b) * w).sum(), [a, b]) <= 1e-5


def test_elementwise_examples():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    with T.precision(np.float64):
        v = T.elu(Tensor([-20.0])).data[0]
    assert v == pytest.approx(-1 + 2.06e-9, abs=1e-11)
    c = T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5)))], axis=1)
    assert c.shape == (2, 8)


def test_concat_and_axis_errors():
    with pytest.raises(ValueError):
        T.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5)))], axis=1)
    with pytest.raises(IndexError):
        T.concat([Tensor(np.zeros((2, 3)))], axis=2)
    with pytest.raises(IndexError):
        T.transpose(Tensor(np.zeros((2, 3))), (0, 5))


def test_sigmoid_extremes_finite():
    out = T.sigmoid(Tensor([-1e4, 1e4])).data
    assert out[0] == 0.0 and out[1] == 1.0


UNARY = {
    "sigmoid": T.sigmoid,
    "elu": T.elu,
    "gelu": T.gelu,
    "exp": T.exp,
    "log": lambda x: T.log(T.exp(x)),
    "abs": lambda x: T.abs_(x),
    "scale": lambda x: T.scale(x, -2.5),
    "mean_axis": lambda x: T.mean(x, axis=1, keepdims=True),
    "sum_axis": lambda x: T.sum_(x, axis=0),
    "reshape": lambda x: T.reshape(x, (4, 3)),
    "transpose": lambda x: T.transpose(x, (1, 0)),
    "roll": lambda x: T.roll(x, (1, -1), (0, 1)),
    "getitem": lambda x: x[1:, ::2],
    "take": lambda x: T.take(x, np.array([[0, 2], [2, 1]]), axis=0),
    "softmax": T.softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name, f64, rng):
    x = Tensor(rng.standard_normal((3, 4)) + 0.1)
    op = UNARY[name]
    w = rng.standard_normal(op(x).shape)
    assert grad_check(lambda: (op(x) * w).sum(), x) <= 1e-5


@pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
def test_binary_broadcast_gradients(op, f64, rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.uniform(0.5, 2.0, (1, 4)))
    w = rng.standard_normal((3, 4))
    assert grad_check(lambda: (op(a, b) * w).sum(), [a, b]) <= 1e-5


def test_concat_split_gradients(f64, rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((2, 5)))
    w = rng.standard_normal((2, 8))

    def f():
        c = T.concat([a, b], axis=1)
        p, q = T.split(c, [6, 2], axis=1)
        return (T.concat([q, p], axis=1) * w).sum()

    assert grad_check(f, [a, b]) <= 1e-5


def test_layer_norm_examples(f64, rng):
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(T.layer_norm(Tensor([[1.0, 1, 1]]), g, b).data, [[0, 0, 0]])
    out = T.layer_norm(Tensor([[-1.0, 0, 1]]), g, b, eps=1e-12).data
    np.testing.assert_allclose(out, [[-1.2247449, 0, 1.2247449]], atol=1e-6)
    with pytest.raises(ValueError):
        T.layer_norm(Tensor([[1.0, 2, 3]]), g, b, eps=0)
    x = Tensor(rng.standard_normal((4, 6)))
    gg, bb = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    w = rng.standard_normal((4, 6))
    assert grad_check(lambda: (T.layer_norm(x, gg, bb) * w).sum(), [x, gg, bb]) <= 1e-5


def test_softmax_examples(f64):
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax(Tensor([10.0, 3.0]), mask=np.array([0.0, -1e9])).data
    assert out[0] == 1.0 and out[1] <= 1e-12


def test_masked_softmax_gradient(f64, rng):
    x = Tensor(rng.standard_normal((3, 5)))
    mask = np.where(rng.random((3, 5)) < 0.3, -1e9, 0.0)
    mask[:, 0] = 0.0
    w = rng.standard_normal((3, 5))
    assert grad_check(lambda: (T.softmax(x, mask) * w).sum(), x) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(n, m, seed):
    r = np.random.default_rng(seed)
    with T.precision(np.float64):
        x = Tensor(r.standard_normal((n, m)) * 10)
        mask = np.where(r.random((n, m)) < 0.4, -1e9, 0.0)
        mask[:, 0] = 0.0
        out = T.softmax(x, mask).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out[mask < 0] <= 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_reshape_transpose_roundtrip_bit_exact(shape, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal(shape))
    axes = tuple(np.random.default_rng(seed).permutation(len(shape)))
    inv = tuple(np.argsort(axes))
    np.testing.assert_array_equal(T.transpose(T.transpose(x, axes), inv).data, x.data)
    np.testing.assert_array_equal(T.reshape(T.reshape(x, (-1,)), shape).data, x.data)


def test_gradcheck_examples(f64):
    x = Tensor([1.0, 2.0])
    assert grad_check(lambda: (x * x).sum(), x) <= 1e-9
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    y = Tensor(np.random.default_rng(0).standard_normal(7))
    assert grad_check(lambda: y.sum(), y) <= 1e-12


def test_five_point_stencil_is_exact_on_cubics(f64):
    x = Tensor([0.7, -1.3, 2.0])
    _, two = numeric_grad(lambda: (x * x * x).sum(), x, h=1e-2)
    _, four = numeric_grad(lambda: (x * x * x).sum(), x, h=1e-2, order=4)
    # the 3-point stencil is off by exactly h^2 for x^3
    np.testing.assert_allclose(two - 3 * x.data ** 2, 1e-4, rtol=1e-6)
    np.testing.assert_allclose(four, 3 * x.data ** 2, rtol=1e-11)


def test_unused_input_has_exactly_zero_numeric_gradient(f64):
    x, unused = Tensor([0.3, 0.1]), Tensor([1.0, 2.0, 3.0])
    for order in (2, 4):
        _, g = numeric_grad(lambda: (x * x).sum() / 3.0, unused, order=order)
        assert np.array_equal(g, np.zeros(3))


def test_record_branches_sees_piecewise_ops_only(f64):
    x = Tensor([-1.0, 0.5])
    with T.record_branches() as seen:
        T.exp(x)
        T.elu(x)
        T.abs_(x)
    assert [m.tolist() for m in seen] == [[False, True], [False, True]]
    T.elu(x)
    assert len(seen) == 2


def test_stencil_across_a_kink_is_excluded(f64):
    # the first coordinate sits 1e-5 from the elu kink; finite differences there
    # mix both branches, which the oracle reports as NaN instead of a wrong value
    x = Tensor([1e-5, 0.8, -0.6, 1.5, -2.0])
    _, g = numeric_grad(lambda: T.elu(x).sum(), x)
    assert np.isnan(g[0])
    np.testing.assert_allclose(g[1:], [1.0, np.exp(-0.6), 1.0, np.exp(-2.0)], rtol=1e-8)
    assert grad_check(lambda: T.elu(x).sum(), x) <= 1e-8


def test_gradcheck_refuses_a_point_mostly_on_kinks(f64):
    x = Tensor([1e-5, -1e-5, 0.5])
    with pytest.raises(ValueError, match="kink"):
        grad_check(lambda: T.abs_(x).sum(), x)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_gradcheck_rejects_nonfinite(f64):
    x = Tensor([1.0])
    with pytest.raises(FloatingPointError, match="coordinate 0"):
        grad_check(lambda: T.log(x - 1.0 + 1e-5).sum(), x, h=1e-4)


def test_gradcheck_requires_float64():
    x = Tensor([1.0], dtype=np.float32)
    with pytest.raises(TypeError):
        grad_check(lambda: x.sum(), x)


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_debug_check_flags_nonfinite():
    with T.debug_checks():
        with pytest.raises(FloatingPointError):
            T.log(Tensor([-1.0]))


def test_tape_is_in_recording_order(f64, rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = T.exp(x)
    z = T.sigmoid(y) * y
    loss = z.sum()
    tape = Tape.from_output(loss)
    seqs = [n._seq for n in tape.nodes]
    assert seqs == sorted(seqs)
    assert tape.ops() == ["exp", "sigmoid", "mul", "sum"]
    for node in tape.nodes:
        for p in node._parents:
            assert p._seq < node._seq


def test_backward_deterministic(f64, rng):
    data = rng.standard_normal((4, 4))
    grads = []
    for _ in range(2):
        x = Tensor(data, requires_grad=True)
        (T.gelu(T.matmul(x, x)) * 3.0).sum().backward()
        grads.append(x.grad.copy())
    assert grads[0].tobytes() == grads[1].tobytes()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y._backward is None


def test_default_dtype_is_float32_and_float64_mode():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
        assert T.gelu(Tensor([1.0])).dtype == np.float64
    assert T.gelu(Tensor([1.0])).dtype == np.float32
