import numpy as np
import pytest

from rpseg import autodiff as ad
from rpseg.autodiff import (
    MlpSpec,
    NumericalError,
    ParamStore,
    Tensor,
    adam_step,
    finite_diff_check,
    glorot_uniform,
)


def weighted_mean(t, weights):
    return ad.mean_all(ad.mul(t, ad.constant(weights, dtype=t.data.dtype)))


class TestDense:
    def test_identity_weights_pass_through(self):
        store = ParamStore(np.float64)
        w = store.add("w", np.eye(3))
        b = store.add("b", np.zeros(3))
        x = ad.constant(np.arange(6.0).reshape(2, 3))
        out = ad.dense(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_small_arithmetic(self):
        store = ParamStore(np.float64)
        w = store.add("w", np.array([[1.0], [1.0]]))
        b = store.add("b", np.array([3.0]))
        out = ad.dense(ad.constant(np.array([[1.0, 2.0]])), w, b)
        assert out.data.tolist() == [[6.0]]

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        store = ParamStore(np.float64)
        w, b = store.add_dense("lin", 5, 4, rng)
        x = store.add("x", rng.standard_normal((3, 5)))
        weights = rng.standard_normal((3, 4))
        err = finite_diff_check(lambda: weighted_mean(ad.dense(x, w, b), weights), store)
        assert err < 1e-6

    def test_shape_mismatch(self):
        store = ParamStore(np.float64)
        w = store.add("w", np.zeros((3, 2)))
        b = store.add("b", np.zeros(2))
        with pytest.raises(ValueError):
            ad.dense(ad.constant(np.zeros((1, 4))), w, b)


class TestSharedMlp:
    def test_single_identity_layer(self):
        store = ParamStore(np.float64)
        w = store.add("m.0.w", np.eye(2))
        b = store.add("m.0.b", np.zeros(2))
        spec = MlpSpec((2, 2), activation="none")
        x = ad.constant(np.arange(12.0).reshape(2, 3, 2))
        out = ad.shared_mlp(x, [(w, b)], spec)
        np.testing.assert_array_equal(out.data, x.data)

    def test_row_swap_equivariance_bit_exact(self):
        rng = np.random.default_rng(1)
        store = ParamStore(np.float64)
        spec = MlpSpec((3, 7, 4))
        for i in range(2):
            store.add_dense(f"m.{i}", spec.widths[i], spec.widths[i + 1], rng)
        x = rng.standard_normal((1, 5, 3))
        swapped = x.copy()
        swapped[0, [0, 1]] = swapped[0, [1, 0]]
        out = ad.shared_mlp(ad.constant(x), store.mlp_layers("m", 2), spec).data
        out_swapped = ad.shared_mlp(ad.constant(swapped), store.mlp_layers("m", 2), spec).data
        np.testing.assert_array_equal(out[0, 0], out_swapped[0, 1])
        np.testing.assert_array_equal(out[0, 1], out_swapped[0, 0])
        np.testing.assert_array_equal(out[0, 2:], out_swapped[0, 2:])

    def test_gradient_check(self):
        rng = np.random.default_rng(2)
        store = ParamStore(np.float64)
        spec = MlpSpec((3, 6, 2))
        for i in range(2):
            store.add_dense(f"m.{i}", spec.widths[i], spec.widths[i + 1], rng)
        x = ad.constant(rng.standard_normal((2, 4, 3)))
        weights = rng.standard_normal((2, 4, 2))
        err = finite_diff_check(
            lambda: weighted_mean(ad.shared_mlp(x, store.mlp_layers("m", 2), spec), weights),
            store)
        assert err < 1e-6


class TestBatchedMatmul:
    def test_identity(self):
        f = np.random.default_rng(0).standard_normal((3, 4, 5))
        eye = np.broadcast_to(np.eye(4), (3, 4, 4)).copy()
        out = ad.matmul(ad.constant(eye), ad.constant(f))
        np.testing.assert_array_equal(out.data, f)

    def test_permutation_matrix_permutes_rows(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((1, 4, 3))
        perm = np.array([2, 0, 3, 1])
        p = np.zeros((1, 4, 4))
        p[0, np.arange(4), perm] = 1.0
        out = ad.matmul(ad.constant(p), ad.constant(f))
        np.testing.assert_array_equal(out.data[0], f[0][perm])

    def test_gradient_check(self):
        rng = np.random.default_rng(3)
        store = ParamStore(np.float64)
        a = store.add("a", rng.standard_normal((2, 3, 3)))
        f = store.add("f", rng.standard_normal((2, 3, 4)))
        weights = rng.standard_normal((2, 3, 4))
        err = finite_diff_check(lambda: weighted_mean(ad.matmul(a, f), weights), store)
        assert err < 1e-6


class TestConcat:
    def test_zero_width_second_operand(self):
        a = np.random.default_rng(0).standard_normal((2, 3, 4))
        out = ad.concat_last(ad.constant(a), ad.constant(np.zeros((2, 3, 0))))
        np.testing.assert_array_equal(out.data, a)

    def test_shapes(self):
        out = ad.concat_last(ad.constant(np.zeros((1, 2, 1))), ad.constant(np.ones((1, 2, 1))))
        assert out.data.shape == (1, 2, 2)
        np.testing.assert_array_equal(out.data[..., 0], 0.0)
        np.testing.assert_array_equal(out.data[..., 1], 1.0)

    def test_split_gradient(self):
        rng = np.random.default_rng(4)
        store = ParamStore(np.float64)
        a = store.add("a", rng.standard_normal((2, 3)))
        b = store.add("b", rng.standard_normal((2, 2)))
        weights = rng.standard_normal((2, 5))
        err = finite_diff_check(lambda: weighted_mean(ad.concat_last(a, b), weights), store)
        assert err < 1e-6


class TestSigmoid:
    def test_zero_maps_to_half(self):
        assert ad.sigmoid(ad.constant(np.array(0.0))).item() == 0.5

    def test_saturation(self):
        assert abs(ad.sigmoid(ad.constant(np.array(40.0))).item() - 1.0) < 1e-12
        assert ad.sigmoid(ad.constant(np.array(-40.0))).item() < 1e-12

    def test_stable_at_extremes(self):
        out = ad.sigmoid(ad.constant(np.array([-500.0, 500.0])))
        assert np.isfinite(out.data).all()

    def test_gradient_check(self):
        rng = np.random.default_rng(5)
        store = ParamStore(np.float64)
        x = store.add("x", rng.standard_normal((4, 2)))
        weights = rng.standard_normal((4, 2))
        err = finite_diff_check(lambda: weighted_mean(ad.sigmoid(x), weights), store)
        assert err < 1e-6


class TestTakeRows:
    def test_gather_and_scatter_with_duplicates(self):
        store = ParamStore(np.float64)
        x = store.add("x", np.arange(6.0).reshape(3, 2))
        idx = np.array([[0, 0], [2, 1]])
        out = ad.take_rows(x, idx)
        assert out.data.shape == (2, 2, 2)
        loss = ad.mean_all(out)
        loss.backward()
        # row 0 gathered twice: double gradient weight
        np.testing.assert_allclose(x.grad[0], 2.0 / 8.0)
        np.testing.assert_allclose(x.grad[1], 1.0 / 8.0)

    def test_gradient_check(self):
        rng = np.random.default_rng(6)
        store = ParamStore(np.float64)
        x = store.add("x", rng.standard_normal((5, 3)))
        idx = rng.integers(0, 5, size=(4, 3))
        weights = rng.standard_normal((4, 3, 3))
        err = finite_diff_check(lambda: weighted_mean(ad.take_rows(x, idx), weights), store)
        assert err < 1e-6


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        store = ParamStore(np.float64)
        p = store.add("p", np.array([1.0, -2.0]))
        before = p.data.copy()
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(p.data, before)
        assert store.step_count == 1

    def test_first_step_matches_hand_evaluation(self):
        # bias-corrected update for g=1 at t=1:
        # m = 0.1, v = 0.001, m_hat = 1, v_hat = 1, delta = -lr / (1 + eps)
        lr, eps = 1e-4, 1e-8
        store = ParamStore(np.float64)
        p = store.add("p", np.array([0.0]))
        p.grad[...] = 1.0
        adam_step(store, lr=lr, eps=eps)
        expected = -lr * 1.0 / (np.sqrt(1.0) + eps)
        assert p.data[0] == pytest.approx(expected, abs=1e-18)
        assert abs(p.data[0] - (-lr)) < 1e-6
        assert p.grad[0] == 0.0  # gradients zeroed afterwards

    def test_two_runs_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(0)
            store = ParamStore(np.float64)
            p = store.add("p", rng.standard_normal(4))
            for _ in range(5):
                loss = ad.mean_all(ad.mul(p, p))
                loss.backward()
                adam_step(store, lr=1e-2)
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_nan_gradient_aborts(self):
        store = ParamStore(np.float64)
        p = store.add("p", np.array([1.0]))
        p.grad[...] = np.nan
        with pytest.raises(NumericalError):
            adam_step(store)


class TestFiniteDiffCheck:
    def test_quadratic_is_tiny(self):
        store = ParamStore(np.float64)
        p = store.add("p", np.array([0.5, -1.5, 2.0]))
        err = finite_diff_check(lambda: ad.mean_all(ad.mul(p, p)), store)
        assert err < 1e-9

    def test_constant_function_gives_zero(self):
        store = ParamStore(np.float64)
        p = store.add("p", np.array([1.0, 2.0]))
        err = finite_diff_check(lambda: ad.mean_all(ad.constant(np.array([3.0]))), store)
        assert err == 0.0


class TestInit:
    def test_same_seed_same_store(self):
        def build():
            rng = np.random.default_rng(9)
            store = ParamStore()
            store.add_dense("a", 8, 4, rng)
            store.add_dense("b", 4, 2, rng)
            return store

        a, b = build(), build()
        for name in a.names():
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_biases_zero(self):
        store = ParamStore()
        store.add_dense("lin", 6, 3, np.random.default_rng(0))
        assert np.all(store["lin.b"].data == 0.0)

    def test_empirical_stddev_matches_uniform_moments(self):
        # uniform(-s, s) has standard deviation s / sqrt(3)
        rng = np.random.default_rng(1)
        values = glorot_uniform((1000, 1000), rng, np.float64)
        s = np.sqrt(6.0 / (1000 + 1000))
        assert abs(values.std() - s / np.sqrt(3.0)) < 0.05 * (s / np.sqrt(3.0))
        assert np.abs(values).max() <= s


class TestNumericalGuards:
    def test_non_finite_tensor_rejected(self):
        with pytest.raises(NumericalError):
            Tensor(np.array([np.inf]))

    def test_log_of_non_positive_rejected(self):
        with pytest.raises(NumericalError):
            ad.log(ad.constant(np.array([0.0])))

    def test_power_gamma_zero_is_constant_one(self):
        store = ParamStore(np.float64)
        x = store.add("x", np.array([0.0, 0.5]))
        out = ad.power(x, 0.0)
        np.testing.assert_array_equal(out.data, [1.0, 1.0])
        ad.mean_all(out).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])


OPS_FOR_SWEEP = ("dense", "shared_mlp", "matmul", "concat", "sigmoid", "elu",
                 "take_rows", "power")


class TestRandomizedGradientSweep:
    @pytest.mark.parametrize("op", OPS_FOR_SWEEP)
    def test_100_random_instances(self, op):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed * 1000 + op_seed(op))
            store = ParamStore(np.float64)
            if op == "dense":
                w, b = store.add_dense("l", int(rng.integers(1, 5)), int(rng.integers(1, 5)), rng)
                x = store.add("x", rng.standard_normal((int(rng.integers(1, 4)),
                                                        w.data.shape[0])))
                weights = rng.standard_normal((x.data.shape[0], w.data.shape[1]))
                f = lambda: weighted_mean(ad.dense(x, w, b), weights)
            elif op == "shared_mlp":
                widths = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4)))
                spec = MlpSpec(widths)
                for i in range(2):
                    store.add_dense(f"m.{i}", widths[i], widths[i + 1], rng)
                x = store.add("x", rng.standard_normal((2, 3, widths[0])))
                weights = rng.standard_normal((2, 3, widths[-1]))
                f = lambda: weighted_mean(ad.shared_mlp(x, store.mlp_layers("m", 2), spec), weights)
            elif op == "matmul":
                k, c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
                a = store.add("a", rng.standard_normal((2, k, k)))
                g = store.add("g", rng.standard_normal((2, k, c)))
                weights = rng.standard_normal((2, k, c))
                f = lambda: weighted_mean(ad.matmul(a, g), weights)
            elif op == "concat":
                a = store.add("a", rng.standard_normal((2, int(rng.integers(1, 4)))))
                b = store.add("b", rng.standard_normal((2, int(rng.integers(1, 4)))))
                weights = rng.standard_normal((2, a.data.shape[1] + b.data.shape[1]))
                f = lambda: weighted_mean(ad.concat_last(a, b), weights)
            elif op == "sigmoid":
                x = store.add("x", 3.0 * rng.standard_normal((3, 2)))
                weights = rng.standard_normal((3, 2))
                f = lambda: weighted_mean(ad.sigmoid(x), weights)
            elif op == "elu":
                x = store.add("x", 2.0 * rng.standard_normal((3, 2)))
                weights = rng.standard_normal((3, 2))
                f = lambda: weighted_mean(ad.elu(x), weights)
            elif op == "take_rows":
                x = store.add("x", rng.standard_normal((4, 2)))
                idx = rng.integers(0, 4, size=(3, 2))
                weights = rng.standard_normal((3, 2, 2))
                f = lambda: weighted_mean(ad.take_rows(x, idx), weights)
            else:  # power
                x = store.add("x", 0.1 + rng.random((3, 2)))
                weights = rng.standard_normal((3, 2))
                exponent = float(rng.uniform(0.5, 3.0))
                f = lambda: weighted_mean(ad.power(x, exponent), weights)
            worst = max(worst, finite_diff_check(f, store))
        assert worst < 1e-4


def op_seed(name: str) -> int:
    return sum(ord(c) for c in name)
