import math

import numpy as np
import pytest

from falformer import numerics as nx
from falformer.errors import NumericError, ShapeError

from conftest import softmax_matrix, well_conditioned_softmax


def triple_loop_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i][j] = s
    return np.array(out)


def erf_series(x, terms=60):
    # Maclaurin series of erf, independent of math.erf / scipy
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(nx.matmul(np.eye(3), a), a)

    def test_hand_example(self):
        out = nx.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
        np.testing.assert_array_equal(out, [[2.0], [4.0]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(nx.matmul(a, b), triple_loop_matmul(a, b), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 16, 64])
    def test_triple_loop_oracle_square(self, n):
        r = np.random.default_rng(n)
        a, b = r.normal(size=(n, n)), r.normal(size=(n, n))
        ref = triple_loop_matmul(a, b)
        err = np.linalg.norm(nx.matmul(a, b) - ref) / np.linalg.norm(ref)
        assert err < 1e-12

    def test_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nx.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_deterministic(self, rng):
        a, b = rng.normal(size=(20, 30)), rng.normal(size=(30, 10))
        assert nx.matmul(a, b).tobytes() == nx.matmul(a, b).tobytes()


class TestSoftmax:
    def test_zero_row_uniform(self):
        out = nx.softmax_rows(np.zeros((2, 5)), scale=3.7)
        np.testing.assert_allclose(out, np.full((2, 5), 0.2), atol=1e-15)

    def test_large_logits_stable(self):
        out = nx.softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_rows_sum_to_one(self, rng):
        out = nx.softmax_rows(rng.normal(size=(4, 4)) * 10, scale=0.5)
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_scale_equivalent_to_prescaling(self, rng):
        a = rng.normal(size=(6, 9))
        np.testing.assert_allclose(nx.softmax_rows(a, scale=0.25), nx.softmax_rows(0.25 * a), atol=1e-15)

    def test_backward_matches_finite_difference(self, rng):
        a = rng.normal(size=(3, 4))
        dy = rng.normal(size=(3, 4))
        y = nx.softmax_rows(a, scale=0.7)
        analytic = nx.softmax_rows_backward(y, dy, scale=0.7)
        numeric = np.zeros_like(a)
        h = 1e-6
        for idx in np.ndindex(a.shape):
            up, down = a.copy(), a.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = ((nx.softmax_rows(up, 0.7) - nx.softmax_rows(down, 0.7)) * dy).sum() / (2 * h)
        np.testing.assert_allclose(analytic, numeric, atol=1e-8)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = nx.layer_norm(np.full((1, 6), 3.0), np.ones(6), np.zeros(6))
        np.testing.assert_array_equal(out, np.zeros((1, 6)))

    def test_zero_gamma_gives_beta(self, rng):
        out = nx.layer_norm(rng.normal(size=(3, 4)), np.zeros(4), np.full(4, 2.5))
        np.testing.assert_array_equal(out, np.full((3, 4), 2.5))

    def test_moments(self, rng):
        x = rng.normal(3.0, 5.0, size=(5, 64))
        out = nx.layer_norm(x, np.ones(64), np.zeros(64), eps=1e-5)
        var = x.var(axis=1)
        # undo the eps term to compare against unit variance
        corrected = out * np.sqrt((var + 1e-5) / var)[:, None]
        assert np.abs(out.mean(axis=1)).max() < 1e-12
        np.testing.assert_allclose(corrected.var(axis=1), 1.0, atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            nx.layer_norm(np.zeros((2, 3)), np.ones(4), np.zeros(3))

    def test_backward(self, rng):
        x = rng.normal(size=(3, 5))
        gamma, beta = rng.normal(size=5), rng.normal(size=5)
        dy = rng.normal(size=(3, 5))
        _, cache = nx.layer_norm(x, gamma, beta, return_cache=True)
        dx, dgamma, dbeta = nx.layer_norm_backward(dy, cache)
        h = 1e-6

        def f(x_, g_, b_):
            return (nx.layer_norm(x_, g_, b_) * dy).sum()

        for arr, grad in ((x, dx), (gamma, dgamma), (beta, dbeta)):
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = f(x, gamma, beta)
                arr[idx] = orig - h
                down = f(x, gamma, beta)
                arr[idx] = orig
                numeric[idx] = (up - down) / (2 * h)
            np.testing.assert_allclose(grad, numeric, atol=1e-7)


class TestGelu:
    def test_zero(self):
        assert nx.gelu(np.array([0.0]))[0] == 0.0

    def test_asymptotes(self):
        np.testing.assert_allclose(nx.gelu(np.array([30.0])), [30.0], rtol=1e-15)
        assert abs(nx.gelu(np.array([-10.0]))[0]) < 1e-6

    def test_one_against_erf_series(self):
        phi1 = 0.5 * (1.0 + erf_series(1.0 / math.sqrt(2.0)))
        assert phi1 == pytest.approx(0.8413447460685429, abs=1e-14)
        np.testing.assert_allclose(nx.gelu(np.array([1.0])), [phi1], rtol=1e-14)

    def test_series_on_grid(self):
        xs = np.linspace(-3, 3, 13)
        ref = [x * 0.5 * (1.0 + erf_series(x / math.sqrt(2.0))) for x in xs]
        np.testing.assert_allclose(nx.gelu(xs), ref, atol=1e-13)

    def test_backward(self, rng):
        x = rng.normal(size=20) * 2
        dy = rng.normal(size=20)
        h = 1e-6
        numeric = (nx.gelu(x + h) - nx.gelu(x - h)) / (2 * h) * dy
        np.testing.assert_allclose(nx.gelu_backward(x, dy), numeric, atol=1e-8)


class TestPinvIterative:
    def test_identity(self):
        np.testing.assert_allclose(nx.pinv_iterative(np.eye(5)), np.eye(5), atol=1e-10)

    def test_diagonal(self):
        np.testing.assert_allclose(nx.pinv_iterative(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]), atol=1e-6)

    def test_zero_matrix_rejected(self):
        with pytest.raises(NumericError):
            nx.pinv_iterative(np.zeros((3, 3)))

    def test_random_8x8_row_stochastic_penrose(self):
        r = np.random.default_rng(8)
        a = well_conditioned_softmax(r, 8)
        z = nx.pinv_iterative(a, 6)
        assert max(nx.penrose_residuals(a, z)) <= 1e-3
        np.testing.assert_allclose(z, nx.pinv_oracle(a), atol=1e-3 * np.linalg.norm(nx.pinv_oracle(a)))

    def test_more_iterations_do_not_hurt(self):
        a = well_conditioned_softmax(np.random.default_rng(3), 32)
        r6 = nx.penrose_residuals(a, nx.pinv_iterative(a, 6))[0]
        r8 = nx.penrose_residuals(a, nx.pinv_iterative(a, 8))[0]
        assert r8 <= r6 + 1e-14

    def test_batched_matches_loop(self, rng):
        a = np.stack([well_conditioned_softmax(rng, 6) for _ in range(3)])
        batched = nx.pinv_iterative(a)
        for i in range(3):
            np.testing.assert_allclose(batched[i], nx.pinv_iterative(a[i]), rtol=1e-13, atol=1e-15)

    def test_generic_softmax_improves_with_iterations(self):
        # no guarantee for ill-conditioned kernels, but the residual must shrink
        a = softmax_matrix(np.random.default_rng(5), 16)
        r1 = nx.penrose_residuals(a, nx.pinv_iterative(a, 1))[0]
        r6 = nx.penrose_residuals(a, nx.pinv_iterative(a, 6))[0]
        assert r6 < r1

    def test_backward_matches_finite_difference(self, rng):
        # row-stochastic input ties every row sum, making the inf-norm scaling
        # non-differentiable; jitter the entries so the max is unique
        a = softmax_matrix(rng, 5, diag_boost=2.0) * rng.uniform(0.8, 1.2, size=(5, 5))
        dz = rng.normal(size=(5, 5))
        _, trace = nx.pinv_iterative(a, 6, return_trace=True)
        analytic = nx.pinv_iterative_backward(dz, trace)
        numeric = np.zeros_like(a)
        h = 1e-6
        for idx in np.ndindex(a.shape):
            up, down = a.copy(), a.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = ((nx.pinv_iterative(up, 6) - nx.pinv_iterative(down, 6)) * dz).sum() / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-6)


class TestPinvOracle:
    def test_identity(self):
        np.testing.assert_allclose(nx.pinv_oracle(np.eye(4)), np.eye(4), atol=1e-15)

    def test_rectangular_penrose(self, rng):
        a = rng.normal(size=(6, 4))
        z = nx.pinv_oracle(a)
        np.testing.assert_allclose(z @ a @ z, z, atol=1e-9)
        assert max(nx.penrose_residuals(a, z)) < 1e-9

    def test_rank_one(self, rng):
        u, v = rng.normal(size=5), rng.normal(size=3)
        expected = np.outer(v, u) / (u @ u * (v @ v))
        np.testing.assert_allclose(nx.pinv_oracle(np.outer(u, v)), expected, atol=1e-9)


class TestHelpers:
    def test_check_finite(self):
        with pytest.raises(NumericError):
            nx.check_finite(np.array([1.0, np.nan]))

    def test_track_allocations_counts_buffers(self):
        with nx.track_allocations() as rep:
            buf = np.ones(1_000_000)
            del buf
        assert rep.peak_bytes >= 8_000_000
