import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loopsign import tensor as T
from loopsign.errors import ContractError, DomainError, ShapeError


def central_diff(fn, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Finite-difference gradient of a scalar numpy function."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        g[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def check_grad(build, x0: np.ndarray, h: float = 1e-4, tol: float = 1e-4):
    with T.default_dtype(np.float64):
        x = T.Tensor(x0.copy(), requires_grad=True)
        loss = build(x)
        T.backward(loss)
        analytic = x.grad.copy()

        def value(arr):
            with T.no_grad():
                return build(T.Tensor(arr)).item()

        numeric = central_diff(value, x0.copy(), h)
    assert rel_err(analytic, numeric) < tol, (analytic, numeric)


class TestElementwise:
    def test_tanh_zero(self):
        out = T.elementwise("tanh", T.Tensor(np.zeros(4)))
        assert np.array_equal(out.data, np.zeros(4))

    def test_atanh_value(self):
        with T.default_dtype(np.float64):
            out = T.elementwise("atanh", T.Tensor(0.5))
        assert out.item() == pytest.approx(0.5493061443340549, abs=1e-12)
        assert out.item() == pytest.approx(0.5 * np.log(3.0), abs=1e-12)

    def test_mismatched_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
            T.elementwise("add", T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(4)))

    def test_arccosh_domain(self):
        with pytest.raises(DomainError):
            T.arccosh(T.Tensor(0.5))

    def test_atanh_domain(self):
        with pytest.raises(DomainError):
            T.atanh(T.Tensor([0.2, 1.0]))

    def test_trailing_axis_broadcast(self):
        out = T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.arange(3.0)))
        assert out.shape == (2, 3)

    def test_clamp_blocks_gradient_outside(self):
        x = T.Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        T.backward(T.clamp(x, 0.0, 1.0).sum())
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    @pytest.mark.parametrize(
        "name, build, sampler",
        [
            ("add", lambda x: T.add(x, x * 3.0).sum(), lambda r: r.normal(size=(3, 2))),
            ("sub", lambda x: T.sub(x * 2.0, x[0]).sum(), lambda r: r.normal(size=(3, 2))),
            ("mul", lambda x: T.mul(x, x[::-1]).sum(), lambda r: r.normal(size=(4,))),
            ("div", lambda x: T.div(x, x * x + 1.0).sum(), lambda r: r.normal(size=(5,))),
            ("neg", lambda x: (-x * x).sum(), lambda r: r.normal(size=(3,))),
            ("tanh", lambda x: T.tanh(x).sum(), lambda r: r.normal(size=(5,))),
            ("atanh", lambda x: T.atanh(x).sum(), lambda r: r.uniform(-0.9, 0.9, size=5)),
            ("arccosh", lambda x: T.arccosh(x).sum(), lambda r: r.uniform(1.1, 4.0, size=5)),
            ("exp", lambda x: T.exp(x).sum(), lambda r: r.normal(size=(5,))),
            ("log", lambda x: T.log(x).sum(), lambda r: r.uniform(0.2, 3.0, size=5)),
            ("sqrt", lambda x: T.sqrt(x).sum(), lambda r: r.uniform(0.2, 3.0, size=5)),
            ("square", lambda x: T.square(x).sum(), lambda r: r.normal(size=(5,))),
            ("clamp", lambda x: (T.clamp(x, -0.5, 0.5) * x).sum(), lambda r: r.normal(size=(6,))),
            ("gelu", lambda x: T.gelu(x).sum(), lambda r: r.normal(size=(6,))),
            ("cosh_sinh", lambda x: (T.cosh(x) * T.sinh(x)).sum(), lambda r: r.normal(size=(4,))),
        ],
    )
    def test_gradients_match_finite_differences(self, name, build, sampler):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        check_grad(build, sampler(rng))


class TestLinalg:
    def test_identity_matmul(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        out = T.linalg("matmul", T.Tensor(np.eye(3)), T.Tensor(x))
        np.testing.assert_allclose(out.data, x.astype(np.float32))

    def test_softmax_symmetric(self):
        out = T.linalg("softmax", T.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_norm_pythagorean(self):
        assert T.linalg("norm", T.Tensor([3.0, 4.0])).item() == pytest.approx(5.0)

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(1).normal(size=(4, 7)) * 10
        out = T.softmax(T.Tensor(x), axis=-1)
        np.testing.assert_allclose(out.data.sum(-1), 1.0, rtol=1e-6)

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2)))], axis=0)

    @pytest.mark.parametrize(
        "name, build, shape",
        [
            ("matmul", lambda x: (T.matmul(x, x.T) * x[0:1, 0:1]).sum(), (3, 4)),
            ("batched_matmul", lambda x: T.square(T.matmul(x, T.transpose(x, (0, 2, 1)))).sum(), (2, 3, 4)),
            ("sum_axis", lambda x: T.square(x.sum(axis=1)).sum(), (3, 4)),
            ("mean_axis", lambda x: T.square(x.mean(axis=(0, 2), keepdims=True)).sum(), (2, 3, 2)),
            ("norm", lambda x: T.norm(x, axis=-1).sum(), (3, 4)),
            ("softmax", lambda x: (T.softmax(x, axis=-1) * T.Tensor(np.arange(4.0))).sum(), (2, 4)),
            ("log_softmax", lambda x: (T.log_softmax(x, axis=0) * T.Tensor(np.arange(3.0)[:, None])).sum(), (3, 2)),
            ("concat", lambda x: T.square(T.concat([x, x * 2.0], axis=1)).sum() + T.concat([x, x], 0)[4, 1], (3, 2)),
            ("slice", lambda x: T.square(x[1:, ::2]).sum() + x[[0, 0, 2], [1, 1, 0]].sum() * x[0, 0], (3, 4)),
            ("reshape_transpose", lambda x: (T.reshape(x, (4, 3)).T @ T.Tensor(np.ones((4, 1)))).sum() * x.sum(), (3, 4)),
            ("take", lambda x: T.square(T.take(x, [0, 2, 2, 1])).sum(), (3, 2)),
        ],
    )
    def test_gradients_match_finite_differences(self, name, build, shape):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        check_grad(build, rng.normal(size=shape))


class TestBackward:
    def test_square_sum(self):
        x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_detach_barrier(self):
        x = T.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = T.Tensor([1.0, 1.0, 1.0], requires_grad=True)
        loss = (x.detach() * x.detach() * y).sum()
        T.backward(loss)
        assert x.grad is None or not np.any(x.grad)
        np.testing.assert_allclose(y.grad, [1.0, 4.0, 9.0])

    def test_detach_bit_zero_in_mixed_graph(self):
        x = T.Tensor([0.3, -0.7], requires_grad=True)
        loss = (T.tanh(x) * 2.0).sum() + T.exp(x.detach()).sum() * 0.0
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, 2.0 * (1 - np.tanh(x.data) ** 2))

    def test_non_scalar_loss(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_repeated_backward_accumulates(self):
        x = T.Tensor([1.0, -2.0], requires_grad=True)
        T.backward((x * 3.0).sum())
        T.backward((x * 3.0).sum())
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

    def test_grad_shape_matches(self):
        x = T.Tensor(np.ones((2, 3)), requires_grad=True)
        b = T.Tensor(np.ones(3), requires_grad=True)
        T.backward(T.square(x + b).sum())
        assert x.grad.shape == x.shape and b.grad.shape == b.shape

    def test_no_grad_records_nothing(self):
        x = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_deep_graph_is_iterative(self):
        x = T.Tensor([0.5], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        T.backward(y.sum())
        np.testing.assert_allclose(x.grad, [1.0])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            a = T.Tensor(rng.normal(size=(5, 5)), requires_grad=True)
            loss = T.softmax(a @ a, axis=-1).sum() + T.tanh(a).mean()
            T.backward(loss)
            return loss.data.copy(), a.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)

    def test_dtype_switch(self):
        with T.default_dtype(np.float64):
            assert T.Tensor([1.0]).dtype == np.float64
        assert T.Tensor([1.0]).dtype == np.float32


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 3))

    def build(x):
        h = T.tanh(x @ T.Tensor(w))
        p = T.softmax(h, axis=-1)
        return (T.log(p + 1.0) * T.sqrt(T.square(x) + 1.0)).sum()

    check_grad(build, rng.normal(size=(2, 3)))
