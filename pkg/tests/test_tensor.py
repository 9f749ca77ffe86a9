import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from umamba2 import tensor as T
from umamba2.tensor import Tensor, gradcheck


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


def naive_conv3d(x, w, stride, pad):
    bsz, cin, h, wd, d = x.shape
    cout, _, kh, kw, kd = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    do = (d + 2 * pad - kd) // stride + 1
    out = np.zeros((bsz, cout, ho, wo, do))
    for b in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    for k in range(do):
                        patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw,
                                   k * stride:k * stride + kd]
                        out[b, o, i, j, k] = np.sum(patch * w[o])
    return out


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), rtol=0, atol=1e-15)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(2, 1, 3, 4)))
    b = Tensor(rng.normal(size=(5, 4, 2)))
    assert gradcheck(lambda a, b: (T.matmul(a, b) ** 2).sum(), [a, b]).passed


# -- conv3d / conv_transpose3d ------------------------------------------------

def test_conv3d_unit_kernel_is_identity():
    x = np.random.default_rng(3).normal(size=(1, 1, 4, 5, 6))
    out = T.conv3d(x, np.ones((1, 1, 1, 1, 1)))
    assert np.array_equal(out.data, x)


def test_conv3d_matches_direct_loops():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    out = T.conv3d(x, w, stride=1, padding=1).data
    assert np.abs(out - naive_conv3d(x, w, 1, 1)).max() < 1e-12


def test_conv3d_strided_matches_direct_loops():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 8, 8, 8))
    w = rng.normal(size=(2, 2, 3, 3, 3))
    out = T.conv3d(x, w, stride=2, padding=1).data
    assert out.shape == (2, 2, 4, 4, 4)
    assert np.abs(out - naive_conv3d(x, w, 2, 1)).max() < 1e-12


def test_conv3d_kernel_too_large():
    with pytest.raises(T.ShapeError, match="larger than padded input"):
        T.conv3d(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 3, 3, 3)))


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1)])
def test_conv_adjoint_identity(stride, pad, k):
    rng = np.random.default_rng(6 + stride + pad + k)
    x = rng.normal(size=(2, 3, 4, 4, 4))
    w = rng.normal(size=(2, 3, k, k, k))
    y_shape = T.conv3d(x, w, stride=stride, padding=pad).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(T.conv3d(x, w, stride=stride, padding=pad).data * y)
    xt = T.conv_transpose3d(y, w, stride=stride, padding=pad,
                            output_padding=_output_padding(4, stride, pad, k))
    rhs = np.sum(x * xt.data)
    assert abs(lhs - rhs) < 1e-10


def _output_padding(n, stride, pad, k):
    out = (n + 2 * pad - k) // stride + 1
    return n - ((out - 1) * stride - 2 * pad + k)


def test_conv_transpose_stride2_shape():
    out = T.conv_transpose3d(np.ones((1, 4, 4, 4, 4)), np.ones((4, 2, 2, 2, 2)), stride=2)
    assert out.shape == (1, 2, 8, 8, 8)


def test_conv_transpose_unit_kernel_identity():
    x = np.random.default_rng(7).normal(size=(1, 1, 3, 4, 5))
    assert np.array_equal(T.conv_transpose3d(x, np.ones((1, 1, 1, 1, 1))).data, x)


@pytest.mark.parametrize("shape,stride,pad", [((1, 2, 4, 4, 4), 1, 1), ((2, 1, 4, 4, 4), 2, 1),
                                              ((1, 2, 3, 4, 5), 1, 0)])
def test_conv3d_gradcheck(shape, stride, pad):
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=shape))
    w = Tensor(rng.normal(size=(2, shape[1], 3, 3, 3)) * 0.3)
    b = Tensor(rng.normal(size=2))
    report = gradcheck(lambda x, w, b: (T.conv3d(x, w, b, stride, pad) ** 2).sum(), [x, w, b])
    assert report.passed, report


@pytest.mark.parametrize("shape,stride,k", [((1, 2, 2, 2, 2), 2, 2), ((1, 1, 3, 3, 3), 1, 3),
                                            ((2, 2, 2, 3, 2), 2, 3)])
def test_conv_transpose3d_gradcheck(shape, stride, k):
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=shape))
    w = Tensor(rng.normal(size=(shape[1], 2, k, k, k)) * 0.3)
    b = Tensor(rng.normal(size=2))
    report = gradcheck(
        lambda x, w, b: (T.conv_transpose3d(x, w, b, stride, k // 2) ** 2).sum(), [x, w, b])
    assert report.passed, report


# -- normalization and activations -------------------------------------------

def test_layer_norm_constant_input_is_zero():
    out = T.layer_norm(np.full((2, 5, 8), 3.7))
    assert np.array_equal(out.data, np.zeros((2, 5, 8)))


def test_layer_norm_moments():
    x = np.random.default_rng(10).normal(3.0, 2.0, size=(2, 5, 8))
    out = T.layer_norm(x, eps=1e-12).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-12
    assert np.abs(out.var(axis=-1) - 1).max() < 1e-6


@pytest.mark.parametrize("shape", [(2, 5, 8), (3, 4), (1, 2, 3, 6)])
def test_layer_norm_gradcheck(shape):
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=shape))
    w = Tensor(rng.normal(size=shape[-1]))
    b = Tensor(rng.normal(size=shape[-1]))
    c = rng.normal(size=shape)
    report = gradcheck(lambda x, w, b: (T.layer_norm(x, w, b) * c).sum(), [x, w, b])
    assert report.max_rel_error < 1e-5, report


@pytest.mark.parametrize("shape", [(1, 2, 3, 3, 3), (2, 3, 2, 4, 2), (2, 1, 4, 4, 1)])
def test_instance_norm_gradcheck(shape):
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=shape))
    w = Tensor(rng.normal(size=shape[1]))
    b = Tensor(rng.normal(size=shape[1]))
    c = rng.normal(size=shape)
    assert gradcheck(lambda x, w, b: (T.instance_norm(x, w, b) * c).sum(), [x, w, b]).passed


def test_instance_norm_per_channel_statistics():
    x = np.random.default_rng(13).normal(5, 3, size=(2, 3, 4, 4, 4))
    out = T.instance_norm(x).data
    assert np.abs(out.mean(axis=(2, 3, 4))).max() < 1e-12
    assert np.abs(out.var(axis=(2, 3, 4)) - 1).max() < 1e-4


def test_softmax_uniform():
    out = T.softmax(np.zeros(7)).data
    np.testing.assert_allclose(out, np.full(7, 1 / 7), rtol=0, atol=1e-15)


def test_softmax_shift_invariance():
    x = np.random.default_rng(14).normal(size=(4, 6))
    assert np.abs(T.softmax(x + 12.5, axis=1).data - T.softmax(x, axis=1).data).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one_and_positive(values):
    out = T.softmax(np.array(values)).data
    assert abs(out.sum() - 1) < 1e-12
    assert np.all(out > 0) or np.ptp(values) > 700


@pytest.mark.parametrize("fn", [T.silu, T.softplus, T.sigmoid, T.exp,
                                lambda x: T.leaky_relu(x, 0.01),
                                lambda x: T.softmax(x, axis=1), lambda x: T.log_softmax(x, axis=0)])
@pytest.mark.parametrize("shape", [(3, 4), (2, 3, 2), (5,)])
def test_activation_gradcheck(fn, shape):
    rng = np.random.default_rng(15)
    if len(shape) == 1 and fn.__name__ == "<lambda>":
        shape = (5, 2)
    # keep leaky_relu inputs away from its kink
    data = rng.normal(size=shape)
    data = np.where(np.abs(data) < 0.05, 0.3, data)
    c = rng.normal(size=shape)
    report = gradcheck(lambda x: (fn(x) * c).sum(), Tensor(data))
    assert report.max_rel_error < 1e-5, report


def test_silu_gradient_matches_fd():
    x = Tensor(np.linspace(-4, 4, 17))
    assert gradcheck(lambda x: T.silu(x).sum(), x).max_rel_error < 1e-5


# -- shape manipulation -------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.randoms(use_true_random=False))
def test_reshape_and_transpose_roundtrip_exact(shape, rnd):
    data = np.arange(np.prod(shape), dtype=float).reshape(shape) * 1.37
    x = Tensor(data)
    flat = T.reshape(T.reshape(x, (-1,)), shape)
    assert np.array_equal(flat.data, data)
    perm = list(range(len(shape)))
    rnd.shuffle(perm)
    back = T.transpose(T.transpose(x, perm), list(np.argsort(perm)))
    assert np.array_equal(back.data, data)
    assert sorted(T.transpose(x, perm).data.ravel()) == sorted(data.ravel())


@pytest.mark.parametrize("shape", [(3, 4), (2, 3, 4), (6,)])
def test_shape_ops_gradcheck(shape):
    rng = np.random.default_rng(16)
    x = Tensor(rng.normal(size=shape))
    y = Tensor(rng.normal(size=shape))

    def f(x, y):
        z = T.concat([x, y * 2.0], axis=0)
        z = T.pad(z, [(1, 2)] + [(0, 0)] * (len(shape) - 1))
        z = T.flip(z, (0,))
        z = T.cumsum(z, axis=0)
        z = z[1:]
        z = T.transpose(z) if z.ndim > 1 else z
        return (z * z).sum() + T.stack([x, y], axis=-1).mean()

    assert gradcheck(f, [x, y]).passed


@pytest.mark.parametrize("shape", [(3, 4), (2, 1, 3), (4,)])
def test_arithmetic_broadcast_gradcheck(shape):
    rng = np.random.default_rng(17)
    a = Tensor(rng.normal(size=shape))
    b = Tensor(rng.uniform(0.5, 2.0, size=shape[-1:]))
    f = lambda a, b: ((a * b - b / (a * a + 1.0) + 3.0 - a) ** 2).sum() + (a / b).mean()
    assert gradcheck(f, [a, b]).passed


def test_absolute_and_log_gradcheck():
    x = Tensor(np.array([0.5, -1.5, 2.0, -0.3]))
    assert gradcheck(lambda x: T.absolute(x).sum() + T.log(x * x).sum(), x).passed


# -- backward -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(18).normal(size=(3, 2)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_inner_product_gives_2x():
    data = np.random.default_rng(19).normal(size=5)
    x = Tensor(data, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * data, rtol=0, atol=0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        (x * 2.0).backward()


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.exp(x)
    z = (y * x + y).sum()
    tape = T.Tape.from_output(z)
    pos = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]


def test_composite_graph_gradcheck():
    rng = np.random.default_rng(20)
    x = Tensor(rng.normal(size=(1, 2, 4, 4, 4)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.2)
    m = Tensor(rng.normal(size=(4, 4)))
    g = Tensor(rng.normal(size=4))
    c = rng.normal(size=(1, 3, 4, 4, 4))

    def f(x, w, m, g):
        h = T.conv3d(x, w, padding=1)
        h = T.matmul(h, m)
        h = T.layer_norm(h, g)
        return (T.softmax(h, axis=1) * c).sum()

    report = gradcheck(f, [x, w, m, g], h=1e-5)
    assert report.max_rel_error < 1e-4, report


def test_gradcheck_sum_is_exact():
    report = gradcheck(lambda x: x.sum(), Tensor(np.random.default_rng(21).normal(size=6)))
    assert report.max_rel_error < 1e-9


def test_gradcheck_rejects_nonfinite():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        gradcheck(lambda x: T.log(x).sum(), Tensor(np.array([-1.0, 1.0])))


def test_gradcheck_flags_argmax_discontinuity():
    # argmax-style step: tape gradient is zero, finite differences see the jump
    x = Tensor(np.array([0.0, 1e-6]))

    def step(x):
        idx = int(np.argmax(x.data))
        return x[idx] * 0.0 + float(idx)

    assert not gradcheck(step, x, h=1e-5, tol=1e-4).passed


def test_default_dtype_switch():
    with T.default_dtype(np.float32):
        assert Tensor([1.0, 2.0]).dtype == np.float32
        assert T.conv3d(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 1, 1, 1))).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf
