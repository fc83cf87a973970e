"""Autodiff engine: frozen examples, finite-difference oracles, invariants."""

import math

import numpy as np
import pytest

from mvdistill import tensor as T
from mvdistill.errors import DimensionError, NumericError, ParameterError, UsageError

from util import gradcheck, max_relative_error, random_params


class TestMatmul:
    def test_hand_forced_2x2(self):
        a = T.Tensor([[1.0, 0.0], [0.0, 2.0]])
        b = T.Tensor([[3.0], [4.0]])
        np.testing.assert_allclose((a @ b).data, [[3.0], [8.0]])

    def test_identity(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.standard_normal((4, 4)).astype(np.float32))
        eye = T.Tensor(np.eye(4, dtype=np.float32))
        np.testing.assert_array_equal((a @ eye).data, a.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        params = random_params({"a": (5, 4), "b": (4, 3)}, rng)

        def loss(p):
            return T.tsum(p["a"] @ p["b"])

        assert gradcheck(loss, params) < 1e-4

    def test_batched_matmul_grads(self):
        rng = np.random.default_rng(8)
        params = random_params({"a": (2, 3, 4), "b": (4, 5)}, rng)

        def loss(p):
            return T.tsum(T.mul(p["a"] @ p["b"], p["a"] @ p["b"]))

        assert gradcheck(loss, params) < 1e-4


class TestSoftmax:
    def test_uniform_input(self):
        out = T.softmax(T.Tensor(np.full(8, 3.0)), temperature=1.0)
        np.testing.assert_allclose(out.data, np.full(8, 1.0 / 8), atol=1e-7)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(16)
        a = T.softmax(T.Tensor(v), temperature=0.5)
        b = T.softmax(T.Tensor(v + 13.25), temperature=0.5)
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)

    def test_closed_form(self):
        # softmax([2,0], t=1) = [e^2, 1] / (e^2 + 1)
        out = T.softmax(T.Tensor([2.0, 0.0]), temperature=1.0)
        e2 = math.exp(2.0)
        np.testing.assert_allclose(
            out.data, [e2 / (e2 + 1.0), 1.0 / (e2 + 1.0)], atol=1e-4
        )
        np.testing.assert_allclose(out.data, [0.8808, 0.1192], atol=1e-4)

    def test_temperature_validation(self):
        with pytest.raises(ParameterError):
            T.softmax(T.Tensor([1.0]), temperature=0.0)

    def test_sums_to_one_and_positive(self):
        # 64-bit comparison arithmetic, per the module invariants.  Input
        # span is kept below the exp underflow threshold (|z|/t < ~700);
        # beyond it strict positivity is unrepresentable in floats.
        rng = np.random.default_rng(2)
        for _ in range(100):
            v = rng.standard_normal(32) * rng.uniform(0.1, 3.0)
            out = T.softmax(T.Tensor(v, dtype=np.float64),
                            temperature=rng.uniform(0.04, 2.0))
            assert abs(out.data.sum() - 1.0) < 1e-6
            assert np.all(out.data > 0)

    def test_float32_storage_sum(self):
        # float32 rounding of K stored probabilities bounds the sum drift
        rng = np.random.default_rng(20)
        for _ in range(50):
            v = rng.standard_normal(256).astype(np.float32) * 5
            out = T.softmax(T.Tensor(v), temperature=0.1)
            assert abs(float(out.data.sum(dtype=np.float64)) - 1.0) < 1e-5

    def test_grad(self):
        rng = np.random.default_rng(3)
        params = random_params({"v": (11,)}, rng)
        w = rng.standard_normal(11)

        def loss(p):
            s = T.softmax(p["v"], temperature=0.3)
            return T.tsum(T.mul(s, T.Tensor(w, dtype=np.float64)))

        assert gradcheck(loss, params) < 1e-4


class TestLogSoftmax:
    def test_matches_log_of_softmax(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal(20)
        ls = T.log_softmax(T.Tensor(v, dtype=np.float64), temperature=0.7)
        s = T.softmax(T.Tensor(v, dtype=np.float64), temperature=0.7)
        np.testing.assert_allclose(ls.data, np.log(s.data), atol=1e-12)

    def test_grad(self):
        rng = np.random.default_rng(5)
        params = random_params({"v": (9,)}, rng)
        w = rng.standard_normal(9)

        def loss(p):
            return T.tsum(T.mul(T.log_softmax(p["v"], temperature=0.2),
                                T.Tensor(w, dtype=np.float64)))

        assert gradcheck(loss, params) < 1e-4


class TestLayerNorm:
    def test_constant_input_all_zero(self):
        x = T.Tensor(np.full((3, 6), 4.2))
        g = T.Tensor(np.ones(6))
        b = T.Tensor(np.zeros(6))
        out = T.layer_norm(x, g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_already_normalized(self):
        x = T.Tensor([[1.0, -1.0]], dtype=np.float64)
        out = T.layer_norm(
            x,
            T.Tensor(np.ones(2), dtype=np.float64),
            T.Tensor(np.zeros(2), dtype=np.float64),
            eps=0.0,
        )
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)

    def test_grad(self):
        rng = np.random.default_rng(6)
        params = random_params({"x": (4, 7), "g": (7,), "b": (7,)}, rng)
        w = rng.standard_normal((4, 7))

        def loss(p):
            out = T.layer_norm(p["x"], p["g"], p["b"], eps=1e-5)
            return T.tsum(T.mul(out, T.Tensor(w, dtype=np.float64)))

        assert gradcheck(loss, params) < 1e-4


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.Tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        out = T.gelu(T.Tensor([10.0], dtype=np.float64))
        assert abs(out.data[0] - 10.0) < 1e-6

    def test_monotone_on_grid(self):
        # 0.5-spaced grid: true GELU dips slightly near x=-0.75, so the
        # monotonicity claim holds on a grid that steps over the dip.
        x = np.arange(-1.0, 5.01, 0.5)
        y = T.gelu(T.Tensor(x, dtype=np.float64)).data
        assert np.all(np.diff(y) > 0)

    def test_grad_at_reference_points(self):
        for x0 in (-2.0, -0.5, 0.0, 0.5, 2.0):
            params = {"x": T.Tensor([x0], requires_grad=True, dtype=np.float64)}

            def loss(p):
                return T.tsum(T.gelu(p["x"]))

            assert gradcheck(loss, params) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        w = T.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        T.backward(T.tsum(w))
        np.testing.assert_array_equal(w.grad, np.ones((3, 4), dtype=np.float32))

    def test_square_scalar(self):
        w = T.Tensor([[3.0]], requires_grad=True)
        T.backward(T.tsum(T.mul(w, w)))
        np.testing.assert_allclose(w.grad, [[6.0]])

    def test_non_scalar_loss_rejected(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            T.backward(T.mul(w, w))

    def test_linearity_of_backward(self):
        # grad of (f + g) equals grad f + grad g, exactly
        rng = np.random.default_rng(9)
        x = rng.standard_normal((4, 4))
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 4))

        def run(which):
            w = T.Tensor(x, requires_grad=True, dtype=np.float64)
            fa = T.tsum(T.mul(w @ T.Tensor(a, dtype=np.float64), w))
            fb = T.tsum(T.gelu(w @ T.Tensor(b, dtype=np.float64)))
            loss = {"a": fa, "b": fb, "ab": T.add(fa, fb)}[which]
            T.backward(loss)
            return w.grad

        np.testing.assert_allclose(
            run("ab"), run("a") + run("b"), atol=1e-6
        )

    def test_determinism_bit_identical(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((8, 8)).astype(np.float32)

        def run():
            w = T.Tensor(x, requires_grad=True)
            out = T.tsum(T.gelu(T.softmax(w @ w, temperature=0.5)))
            T.backward(out)
            return out.data.copy(), w.grad.copy()

        o1, g1 = run()
        o2, g2 = run()
        assert np.array_equal(o1, o2)
        assert np.array_equal(g1, g2)

    def test_untouched_leaf_stays_none_until_zeroed(self):
        w = T.Tensor(np.ones(3), requires_grad=True)
        unused = T.Tensor(np.ones(3), requires_grad=True)
        unused.zero_grad()
        T.backward(T.tsum(w))
        np.testing.assert_array_equal(unused.grad, np.zeros(3, dtype=np.float32))

    def test_nan_forward_raises(self):
        with pytest.raises(NumericError):
            T.tlog(T.Tensor([-1.0]))


class TestFiniteDifferenceSweep:
    """Spec invariant: every differentiable op agrees with central fd on
    >= 100 random inputs at rel err < 1e-4 (64-bit comparison)."""

    def test_sweep_all_ops(self):
        rng = np.random.default_rng(11)
        checked = 0
        for trial in range(20):
            params = random_params(
                {"a": (3, 5), "b": (5, 4), "g": (4,), "c": (4,)}, rng
            )
            w = rng.standard_normal((3, 4))

            def loss(p):
                h = p["a"] @ p["b"]
                h = T.layer_norm(h, p["g"], p["c"], eps=1e-5)
                h = T.gelu(h)
                s = T.softmax(h, temperature=0.5)
                ls = T.log_softmax(h, temperature=1.5)
                mix = T.add(T.mul(s, T.Tensor(w, dtype=np.float64)), T.mul(ls, 0.25))
                mix = T.add(mix, T.pow_scalar(T.texp(T.mul(h, 0.1)), 2.0))
                return T.tmean(mix)

            assert gradcheck(loss, params) < 1e-4
            checked += sum(p.size for p in params.values())
        assert checked >= 100

    def test_elementwise_ops_random_points(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            x0 = rng.uniform(0.2, 3.0)
            params = {"x": T.Tensor([x0], requires_grad=True, dtype=np.float64)}

            def loss(p):
                v = T.add(T.mul(T.tsqrt(p["x"]), T.tlog(p["x"])), T.texp(T.neg(p["x"])))
                return T.tsum(T.div(v, T.add(p["x"], 1.0)))

            assert gradcheck(loss, params, tol=1e-4) < 1e-4


class TestShapeOps:
    def test_concat_and_slice_grads(self):
        rng = np.random.default_rng(13)
        params = random_params({"a": (2, 3), "b": (4, 3)}, rng)
        w = rng.standard_normal((6, 3))

        def loss(p):
            cat = T.concat([p["a"], p["b"]], axis=0)
            piece = cat[1:5]
            return T.add(
                T.tsum(T.mul(cat, T.Tensor(w, dtype=np.float64))),
                T.tsum(T.mul(piece, piece)),
            )

        assert gradcheck(loss, params) < 1e-4

    def test_reshape_transpose_grads(self):
        rng = np.random.default_rng(14)
        params = random_params({"a": (2, 3, 4)}, rng)

        def loss(p):
            x = T.transpose(p["a"], (1, 0, 2))
            x = T.reshape(x, (3, 8))
            return T.tsum(T.mul(x, x))

        assert gradcheck(loss, params) < 1e-4

    def test_broadcast_add_grads(self):
        rng = np.random.default_rng(15)
        params = random_params({"a": (4, 5), "bias": (5,)}, rng)

        def loss(p):
            return T.tsum(T.gelu(T.add(p["a"], p["bias"])))

        assert gradcheck(loss, params) < 1e-4


class TestBCE:
    def test_matches_naive_formula(self):
        rng = np.random.default_rng(16)
        z = rng.standard_normal(50)
        y = (rng.random(50) < 0.5).astype(np.float64)
        out = T.bce_with_logits(T.Tensor(z, dtype=np.float64), y)
        sig = 1.0 / (1.0 + np.exp(-z))
        naive = -(y * np.log(sig) + (1 - y) * np.log(1 - sig))
        np.testing.assert_allclose(out.data, naive, atol=1e-10)

    def test_grad(self):
        rng = np.random.default_rng(17)
        params = random_params({"z": (12,)}, rng)
        y = (rng.random(12) < 0.5).astype(np.float64)

        def loss(p):
            return T.tmean(T.bce_with_logits(p["z"], y))

        assert gradcheck(loss, params) < 1e-4


def test_l2_normalize_scale_invariance():
    rng = np.random.default_rng(18)
    x = rng.standard_normal(10)
    a = T.l2_normalize(T.Tensor(x, dtype=np.float64)).data
    for c in (3.7, 1e-4, 250.0):
        b = T.l2_normalize(T.Tensor(c * x, dtype=np.float64)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_l2_normalize_grad():
    rng = np.random.default_rng(19)
    params = random_params({"x": (3, 6)}, rng)
    w = rng.standard_normal((3, 6))

    def loss(p):
        return T.tsum(T.mul(T.l2_normalize(p["x"], axis=-1),
                            T.Tensor(w, dtype=np.float64)))

    assert gradcheck(loss, params) < 1e-4


def test_no_grad_builds_no_tape():
    w = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        out = T.tsum(T.mul(w, w))
    assert not out.requires_grad
    assert out._parents == ()


def test_max_relative_error_helper():
    assert max_relative_error([1.0], [1.0]) == 0.0
    assert max_relative_error([1.0], [1.0001]) == pytest.approx(1e-4, rel=1e-2)
