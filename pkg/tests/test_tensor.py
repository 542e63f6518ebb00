import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lwta_icp import tensor as T
from lwta_icp.errors import ContractError, DimensionError

from conftest import central_difference


def grad_of(fn, *arrays):
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.GraphTape():
        out = fn(*leaves)
        out.backward()
    return [leaf.grad for leaf in leaves]


def numeric_grads(fn, *arrays):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value():
        return float(fn(*[T.Tensor(a) for a in arrays]).data)

    return [central_difference(value, a) for a in arrays]


def assert_grads_match(fn, *arrays, rtol=1e-5, atol=1e-7):
    for analytic, numeric in zip(grad_of(fn, *arrays), numeric_grads(fn, *arrays)):
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def naive_conv(x, w):
    """Nested-loop 'same' cross-correlation oracle."""
    n, H, L, C = x.shape
    kh, kl, _, K = w.shape
    pt, pl = (kh - 1) // 2, (kl - 1) // 2
    out = np.zeros((n, H, L, K))
    for b in range(n):
        for r in range(H):
            for c in range(L):
                for k in range(K):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kl):
                            rr, cc = r + i - pt, c + j - pl
                            if 0 <= rr < H and 0 <= cc < L:
                                acc += np.dot(x[b, rr, cc, :], w[i, j, :, k])
                    out[b, r, c, k] = acc
    return out


RNG = np.random.default_rng(1234)

UNARY = {
    "exp": (T.exp, np.exp),
    "expm1": (T.expm1, np.expm1),
    "log": (lambda a: T.log(a * a + 0.5), lambda a: np.log(a * a + 0.5)),
    "log1p": (lambda a: T.log1p(a * a), lambda a: np.log1p(a * a)),
    "sigmoid": (T.sigmoid, lambda a: 1 / (1 + np.exp(-a))),
    "softplus": (T.softplus, lambda a: np.log1p(np.exp(a))),
    "log_sigmoid": (T.log_sigmoid, lambda a: -np.log1p(np.exp(-a))),
    "tanh": (T.tanh, np.tanh),
    "relu": (T.relu, lambda a: np.maximum(a, 0)),
    "neg": (T.neg, np.negative),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_forward_and_gradient(name):
    op, ref = UNARY[name]
    a = RNG.uniform(-2, 2, size=(3, 4))
    a[np.abs(a) < 0.05] = 0.3  # keep away from relu's kink
    np.testing.assert_allclose(op(T.Tensor(a)).data, ref(a), rtol=1e-12, atol=1e-12)
    assert_grads_match(lambda t: T.sum(op(t) * op(t)), a)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "pow"])
def test_binary_broadcast_gradient(name):
    ops = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div, "pow": T.pow}
    a = RNG.uniform(0.5, 2, size=(3, 4))
    b = RNG.uniform(0.5, 2, size=(1, 4))
    assert_grads_match(lambda x, y: T.sum(ops[name](x, y) ** 2), a, b)


def test_reductions_and_shape_ops_gradients():
    a = RNG.normal(size=(2, 3, 4))
    assert_grads_match(lambda t: T.sum(T.mean(t, axis=(0, 2)) ** 2), a)
    assert_grads_match(lambda t: T.sum(T.cumsum(t, axis=1) ** 2), a)
    assert_grads_match(lambda t: T.sum(T.softmax(t, axis=-1) * np.arange(4.0)), a)
    assert_grads_match(lambda t: T.sum(T.log_softmax(t, axis=1) * t), a)
    assert_grads_match(lambda t: T.sum(T.transpose(t, (2, 0, 1))[1:, :, ::2] ** 3), a)
    assert_grads_match(lambda t: T.sum(T.concat([t, t * 2], axis=1) ** 2), a)
    assert_grads_match(lambda t: T.sum(T.reshape(t, (6, 4)) @ np.ones((4, 2))), a)
    assert_grads_match(lambda t: T.sum(T.clip(t, -0.5, 0.5) * t), a, atol=1e-6)


def test_getitem_fancy_index_accumulates():
    a = RNG.normal(size=(4, 3))
    idx = np.array([0, 2, 2, 1, 0])
    grads = grad_of(lambda t: T.sum(t[idx]), a)[0]
    np.testing.assert_array_equal(grads[:, 0], [2, 1, 2, 0])


def test_softmax_is_stable_for_huge_logits():
    out = T.softmax(T.Tensor([[1000.0, 1000.0, -1000.0]]), axis=1).data
    np.testing.assert_allclose(out, [[0.5, 0.5, 0.0]])


def test_matmul_gradient_and_shape_error():
    a, b = RNG.normal(size=(3, 5)), RNG.normal(size=(5, 2))
    assert_grads_match(lambda x, y: T.sum(T.tanh(T.matmul(x, y))), a, b)
    with pytest.raises(DimensionError, match=r"\(3, 5\).*\(3, 2\)"):
        T.matmul(T.Tensor(a), T.Tensor(np.ones((3, 2))))


@pytest.mark.parametrize("kernel", [1, 2, 3, 5])
def test_conv2d_matches_nested_loop_oracle(kernel):
    x = RNG.normal(size=(2, 5, 6, 3))
    w = RNG.normal(size=(kernel, kernel, 3, 4))
    np.testing.assert_allclose(T.conv2d(x, w).data, naive_conv(x, w), rtol=1e-12, atol=1e-12)


def test_conv2d_single_image_and_kernel_shapes():
    x = RNG.normal(size=(5, 5, 2))
    w = RNG.normal(size=(3, 3, 2))
    out = T.conv2d(x, w)
    assert out.shape == (5, 5)
    np.testing.assert_allclose(out.data, naive_conv(x[None], w[..., None])[0, :, :, 0])


def test_conv2d_gradient():
    x = RNG.normal(size=(2, 4, 4, 2))
    w = RNG.normal(size=(3, 3, 2, 3))
    assert_grads_match(lambda a, b: T.sum(T.conv2d(a, b) ** 2), x, w)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError, match="channel"):
        T.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)))


def test_backward_requires_scalar_and_tape():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with T.GraphTape():
        with pytest.raises(ContractError):
            (a * 2).backward()
    detached = T.sum(a)  # no tape: nothing recorded
    with pytest.raises(ContractError):
        detached.backward()


def test_no_grad_and_stop_gradient_block_recording():
    a = T.Tensor(np.ones(3), requires_grad=True)
    with T.GraphTape() as tape:
        with T.no_grad():
            out = T.sum(a * 3)
        assert not out.requires_grad
        y = T.sum(T.stop_gradient(a) * a)
        y.backward()
    np.testing.assert_array_equal(a.grad, np.ones(3))
    assert len(tape) > 0


def test_gradients_accumulate_across_backward_calls():
    a = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with T.GraphTape():
            T.sum(a * a).backward()
    np.testing.assert_array_equal(a.grad, [4.0, 8.0])


def test_domain_violations_counted_not_raised():
    T.reset_diagnostics()
    with np.errstate(all="ignore"):
        out = T.log(T.Tensor([-1.0, 0.0, 1.0]))
        T.div(T.Tensor([1.0]), T.Tensor([0.0]))
    assert np.isnan(out.data[0]) and np.isneginf(out.data[1])
    assert T.nan_events() >= 3
    T.reset_diagnostics()
    assert T.nan_events() == 0


def test_float32_mode():
    T.set_default_dtype(np.float32)
    try:
        assert T.Tensor([1.0, 2.0]).data.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    with pytest.raises(ContractError):
        T.set_default_dtype(np.int32)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-3, 3)),
       st.sampled_from([(), (1,), "row"]))
def test_add_broadcast_gradient_sums_over_broadcast_axes(a, variant):
    b_shape = (1,) * a.ndim if variant == (1,) else (a.shape[-1],) if variant == "row" else ()
    b = np.full(b_shape, 0.5)
    ga, gb = grad_of(lambda x, y: T.sum(x + y), a, b)
    np.testing.assert_array_equal(ga, np.ones_like(a))
    assert gb.shape == b.shape
    np.testing.assert_allclose(gb, np.full(b.shape, a.size / max(b.size, 1)))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)), elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(a):
    out = T.softmax(T.Tensor(a), axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-12)


def test_parameters_frozen_at_record_time_get_no_gradient():
    w = T.Tensor(np.ones(3), requires_grad=True)
    x = T.Tensor(np.arange(3.0), requires_grad=True)
    with T.GraphTape():
        w.requires_grad = False
        out = T.sum(w * x)
        w.requires_grad = True  # unfreezing later must not reopen the recorded edge
        out.backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, np.ones(3))
