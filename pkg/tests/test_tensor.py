import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctrn import tensor as tn
from ctrn.tensor import Parameter, Tensor


def naive_conv1d(x, w, b, pad):
    B, D, T = x.shape
    Dout, _, K = w.shape
    out = np.zeros((B, Dout, T))
    for bi in range(B):
        for o in range(Dout):
            for t in range(T):
                acc = b[o]
                for d in range(D):
                    for k in range(K):
                        s = t + k - pad
                        if 0 <= s < T:
                            acc += w[o, d, k] * x[bi, d, s]
                out[bi, o, t] = acc
    return out


def param(rng, *shape, name="p"):
    return Parameter(rng.standard_normal(shape), name)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = tn.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    out = tn.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11]])


def test_matmul_gradients_finite_difference():
    rng = np.random.default_rng(0)
    A, B = param(rng, 3, 4), param(rng, 4, 2)
    err = tn.grad_check(lambda: tn.sum_(tn.mul(tn.matmul(A, B), tn.matmul(A, B))), [A, B])
    assert err < 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(tn.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------- conv1d

def test_conv_zero_input_gives_bias():
    rng = np.random.default_rng(1)
    out = tn.conv1d_same(Tensor(np.zeros((2, 3, 6))), Tensor(rng.standard_normal((4, 3, 5))),
                         Tensor([1.0, 2.0, 3.0, 4.0]), 2)
    for o in range(4):
        assert np.all(out.data[:, o] == o + 1)


def test_conv_identity_kernel():
    x = np.random.default_rng(2).standard_normal((1, 1, 7))
    out = tn.conv1d_same(Tensor(x), Tensor([[[1.0]]]), Tensor([0.0]), 0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((1, 2, 5)), rng.standard_normal((2, 2, 3)), rng.standard_normal(2)
    out = tn.conv1d_same(Tensor(x), Tensor(w), Tensor(b), 1)
    np.testing.assert_allclose(out.data, naive_conv1d(x, w, b, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("k,pad", [(2, 0), (4, 2)])
def test_conv_rejects_even_kernel(k, pad):
    with pytest.raises(ValueError, match="odd"):
        tn.conv1d_same(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, k))), None, pad)


def test_conv_rejects_inconsistent_padding():
    with pytest.raises(ValueError, match="padding"):
        tn.conv1d_same(Tensor(np.zeros((1, 1, 5))), Tensor(np.zeros((1, 1, 3))), None, 2)


@settings(max_examples=25, deadline=None)
@given(k=st.sampled_from([1, 3, 5, 7, 9]), T=st.integers(1, 12))
def test_conv_preserves_time_extent(k, T):
    out = tn.conv1d_same(Tensor(np.ones((2, 3, T))), Tensor(np.ones((4, 3, k))), None, (k - 1) // 2)
    assert out.shape == (2, 4, T)


# ----------------------------------------------------------- elementwise

def test_sigmoid_zero():
    assert tn.sigmoid(Tensor(0.0)).data == 0.5


def test_sigmoid_extremes_stay_open_interval():
    s = tn.sigmoid(Tensor([-30.0, 30.0])).data
    assert 0 < s[0] < 0.5 < s[1] < 1


def test_relu_definition_and_idempotence():
    r = tn.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(r.data, [0, 0, 2])
    np.testing.assert_array_equal(tn.relu(r).data, r.data)


def test_sigmoid_gradient_at_one():
    x = Parameter([1.0], "x")
    assert tn.grad_check(lambda: tn.sum_(tn.sigmoid(x)), [x]) < 1e-6
    tn.backward(tn.sum_(tn.sigmoid(x)))
    s = 1 / (1 + np.exp(-1.0))
    assert x.grad[0] == pytest.approx(s * (1 - s), rel=1e-12)


def test_elementwise_shape_mismatch():
    with pytest.raises(tn.ShapeError):
        tn.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(tn.ShapeError):
        tn.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_scalar_broadcast_gradient():
    rng = np.random.default_rng(4)
    x, c = param(rng, 3, 2), Parameter([0.7], "c")
    assert tn.grad_check(lambda: tn.sum_(tn.mul(tn.add(x, c), x)), [x, c]) < 1e-6


def test_mean_over_axis():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_allclose(tn.mean(x, axis=1).data, [1.0, 4.0])
    assert tn.mean(x).data == 2.5


# --------------------------------------------------------------- softmax

def test_softmax_uniform():
    np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    np.testing.assert_array_equal(tn.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_jacobian():
    x = Parameter(np.random.default_rng(5).standard_normal(5), "x")
    w = np.random.default_rng(6).standard_normal(5)
    assert tn.grad_check(lambda: tn.sum_(tn.mul(tn.softmax(x, 0), Tensor(w))), [x]) < 1e-5


def test_softmax_invalid_axis():
    with pytest.raises(tn.ShapeError):
        tn.softmax(Tensor(np.ones((2, 2))), axis=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_slices_sum_to_one_and_preserve_order(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1e3, 1e3, size=(4, 6))
    s = tn.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    for row_x, row_s in zip(x, s):
        order = np.argsort(row_x, kind="stable")
        assert np.all(np.diff(row_s[order]) >= 0)


# --------------------------------------------------------------- dropout

def test_dropout_identities():
    x = Tensor(np.random.default_rng(7).standard_normal((3, 4)))
    assert tn.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert tn.dropout(x, 0.9, False, None) is x


def test_dropout_zero_fraction():
    x = Tensor(np.ones((32, 8, 16)))
    out = tn.dropout(x, 0.3, True, np.random.default_rng(123)).data
    frac = np.mean(out == 0)
    assert abs(frac - 0.3) <= 0.03
    np.testing.assert_allclose(out[out != 0], 1 / 0.7)


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        tn.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


# ------------------------------------------------------------------- bce

def bce_oracle(p, y, m=None):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    m = np.ones_like(p) if m is None else m
    terms = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    return float((terms * m).sum() / m.sum())


def test_bce_uninformative():
    y = (np.random.default_rng(8).random((5, 3)) < 0.5).astype(float)
    assert tn.bce(Tensor(np.full((5, 3), 0.5)), y).data == pytest.approx(np.log(2), abs=1e-15)


def test_bce_perfect_prediction():
    y = (np.random.default_rng(9).random((5, 3)) < 0.5).astype(float)
    assert tn.bce(Tensor(y.copy()), y).data <= 1e-7 * 2


def test_bce_matches_formula():
    rng = np.random.default_rng(10)
    p, y = rng.uniform(0.01, 0.99, (4, 3)), (rng.random((4, 3)) < 0.5).astype(float)
    assert abs(float(tn.bce(Tensor(p), y).data) - bce_oracle(p, y)) <= 1e-12


def test_bce_mask_and_empty_mask():
    rng = np.random.default_rng(11)
    p, y = rng.uniform(0.01, 0.99, (4, 3)), (rng.random((4, 3)) < 0.5).astype(float)
    m = np.array([1, 0, 1, 1.0])
    got = float(tn.bce(Tensor(p), y, m).data)
    assert abs(got - bce_oracle(p, y, np.repeat(m[:, None], 3, 1))) <= 1e-12
    with pytest.raises(ValueError):
        tn.bce(Tensor(p), y, np.zeros(4))


# -------------------------------------------------------------- backward

def test_backward_linear():
    w = Parameter(np.array([0.3, -2.0, 5.0]), "w")
    tn.backward(tn.sum_(w))
    np.testing.assert_array_equal(w.grad, [1, 1, 1])


def test_backward_quadratic():
    w = Parameter(np.array([1.0, 2.0]), "w")
    tn.backward(tn.scale(tn.sum_(tn.mul(w, w)), 0.5))
    np.testing.assert_array_equal(w.grad, [1, 2])


def test_backward_rejects_non_scalar():
    w = Parameter(np.ones(3), "w")
    with pytest.raises(ValueError):
        tn.backward(tn.scale(w, 2.0))


def test_backward_twice_doubles_exactly():
    rng = np.random.default_rng(12)
    A, B = param(rng, 3, 4), param(rng, 4, 2)
    loss = tn.sum_(tn.sigmoid(tn.matmul(A, B)))
    tn.backward(loss)
    first = A.grad.copy(), B.grad.copy()
    tn.backward(loss)
    np.testing.assert_array_equal(A.grad, 2 * first[0])
    np.testing.assert_array_equal(B.grad, 2 * first[1])


def test_shared_subexpression_visited_once():
    x = Parameter(np.array([2.0]), "x")
    y = tn.mul(x, x)
    loss = tn.sum_(tn.add(y, y))  # 2 x^2
    tn.backward(loss)
    assert x.grad[0] == 8.0


# ------------------------------------------------------------ grad_check

def test_grad_check_sum_is_exact():
    x = param(np.random.default_rng(13), 4, 3)
    assert tn.grad_check(lambda: tn.sum_(x), [x]) < 1e-10


def test_grad_check_bce_sigmoid_matmul():
    rng = np.random.default_rng(14)
    A, B = param(rng, 3, 2), param(rng, 2, 2)
    y = (rng.random((3, 2)) < 0.5).astype(float)
    assert tn.grad_check(lambda: tn.bce(tn.sigmoid(tn.matmul(A, B)), y), [A, B]) < 1e-5


def test_grad_check_detects_corrupted_gradient():
    def doubled_square(x):
        return tn._make(x.data**2, (x,), "bad_square", lambda g: (g * 4.0 * x.data,))

    x = Parameter(np.array([1.0, -2.0, 1.5]), "x")
    assert tn.grad_check(lambda: tn.sum_(doubled_square(x)), [x]) > 0.3


OPS = {
    "matmul": lambda a, b: tn.matmul(a, b),
    "add": lambda a, b: tn.add(tn.matmul(a, b), tn.matmul(a, b)),
    "mul": lambda a, b: tn.mul(tn.matmul(a, b), tn.matmul(a, b)),
    "sub": lambda a, b: tn.sub(tn.matmul(a, b), tn.scale(tn.matmul(a, b), 0.3)),
    "relu": lambda a, b: tn.relu(tn.matmul(a, b)),
    "sigmoid": lambda a, b: tn.sigmoid(tn.matmul(a, b)),
    "softmax": lambda a, b: tn.softmax(tn.matmul(a, b), axis=0),
    "mean": lambda a, b: tn.mean(tn.matmul(a, b), axis=1),
    "transpose": lambda a, b: tn.transpose(tn.matmul(a, b), (1, 0)),
    "bias_add": lambda a, b: tn.bias_add(tn.matmul(a, b), tn.sum_(b, axis=0)),
    "repeat": lambda a, b: tn.repeat_new_axis(tn.matmul(a, b), 3, axis=1),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(name, seed):
    rng = np.random.default_rng(seed)
    a, b = param(rng, 3, 4), param(rng, 4, 4)
    w = Tensor(rng.standard_normal(OPS[name](a, b).shape))
    f = lambda: tn.sum_(tn.mul(OPS[name](a, b), w))  # noqa: E731
    assert tn.grad_check(f, [a, b]) < 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_conv_bn_dropout_bce_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = param(rng, 2, 3, 6)
    w = param(rng, 3, 3, 3)
    b = param(rng, 3)
    gamma, beta = Parameter(rng.uniform(0.5, 1.5, 3), "g"), param(rng, 3)
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1.0]])
    y = (rng.random((2, 6, 3)) < 0.5).astype(float)

    def f():
        h = tn.transpose(tn.conv1d_same(x, w, b, 1), (0, 2, 1))
        h = tn.batch_norm(h, gamma, beta, mask=mask)
        h = tn.dropout(h, 0.3, True, np.random.default_rng(seed))
        return tn.bce(tn.sigmoid(h), y, mask)

    assert tn.grad_check(f, [x, w, b, gamma, beta]) < 1e-5


def test_batch_norm_masked_statistics():
    rng = np.random.default_rng(15)
    x = rng.standard_normal((2, 5, 3))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1.0]])
    out = tn.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), mask=mask).data
    sel = out[mask > 0]
    np.testing.assert_allclose(sel.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(sel.var(axis=0), 1, atol=1e-4)
    assert np.all(out[mask == 0] == 0)
