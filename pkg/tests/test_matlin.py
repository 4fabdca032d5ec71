import numpy as np
import pytest

from ocorobust.errors import DimensionMismatch, FactorizationError
from ocorobust.matlin import (
    matmul,
    matrix_power,
    numeric_rank,
    power_norm_certificate,
    solve_spd,
    spectral_norm_upper,
    symmetric_eig_bounds,
)

from conftest import random_spd


class TestMatmul:
    def test_identity(self):
        m = np.array([[2.0, 3.0], [4.0, 5.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_hand_expansion(self):
        m = [[1.0, 1.0], [0.0, 1.0]]
        assert np.array_equal(matmul(m, m), [[1.0, 2.0], [0.0, 1.0]])

    def test_annihilator(self):
        m = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(matmul(np.zeros((2, 2)), m), np.zeros((2, 3)))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            matmul(np.eye(2), np.eye(3))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            matmul([[np.nan]], [[1.0]])

    def test_associativity_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((4, 2))
            c = rng.standard_normal((2, 5))
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            assert np.allclose(left, right, rtol=1e-9, atol=1e-12)


class TestMatrixPower:
    def test_zero_power(self):
        a = np.array([[3.0, 1.0], [2.0, 5.0]])
        assert np.array_equal(matrix_power(a, 0), np.eye(2))

    def test_scalar_exponentiation(self):
        assert np.allclose(matrix_power(np.diag([0.5, 0.5]), 3), np.diag([0.125, 0.125]))

    def test_nilpotent(self):
        assert np.array_equal(matrix_power([[0.0, 1.0], [0.0, 0.0]], 2), np.zeros((2, 2)))

    def test_additivity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.standard_normal((3, 3)) * 0.6
            j, k = rng.integers(0, 5, size=2)
            assert np.allclose(matrix_power(a, j + k),
                               matmul(matrix_power(a, j), matrix_power(a, k)),
                               rtol=1e-9, atol=1e-12)

    def test_non_square(self):
        with pytest.raises(DimensionMismatch):
            matrix_power(np.ones((2, 3)), 2)


class TestSolveSpd:
    def test_identity(self):
        b = np.array([1.0, -2.0, 3.0])
        assert np.allclose(solve_spd(np.eye(3), b), b)

    def test_diagonal(self):
        x = solve_spd([[4.0, 0.0], [0.0, 9.0]], [8.0, 27.0])
        assert np.allclose(x, [2.0, 3.0])

    def test_two_by_two(self):
        x = solve_spd([[2.0, 1.0], [1.0, 2.0]], [3.0, 3.0])
        assert np.allclose(x, [1.0, 1.0])

    def test_residual_contract(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 13))
            a = random_spd(rng, n, scale=0.5)
            b = rng.standard_normal(n)
            x = solve_spd(a, b)
            assert np.linalg.norm(a @ x - b) <= 1e-10 * (1.0 + np.linalg.norm(b))

    def test_not_spd(self):
        with pytest.raises(FactorizationError):
            solve_spd([[1.0, 0.0], [0.0, -1.0]], [1.0, 1.0])

    def test_not_symmetric(self):
        with pytest.raises(FactorizationError):
            solve_spd([[1.0, 1.0], [0.0, 1.0]], [1.0, 1.0])


class TestNumericRank:
    def test_identity(self):
        assert numeric_rank(np.eye(3)) == 3

    def test_proportional_rows(self):
        assert numeric_rank([[1.0, 2.0], [2.0, 4.0]]) == 1

    def test_zero(self):
        assert numeric_rank(np.zeros((3, 2))) == 0

    def test_row_permutation_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            a = rng.standard_normal((5, 3)) @ rng.standard_normal((3, 4))
            r = numeric_rank(a)
            perm = rng.permutation(5)
            assert numeric_rank(a[perm]) == r


class TestPowerNormCertificate:
    def test_scalar_half(self):
        cert = power_norm_certificate(np.array([[0.5]]), n_max=10)
        assert cert.k == 1 and cert.bound == pytest.approx(0.5)

    def test_nilpotent(self):
        cert = power_norm_certificate([[0.0, 2.0], [0.0, 0.0]], n_max=10)
        assert cert.k == 2 and cert.bound == 0.0

    def test_identity_fails(self):
        assert power_norm_certificate(np.eye(2), n_max=10) is None

    def test_decay_constants_bound_all_powers(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = rng.standard_normal((3, 3))
            a *= 0.8 / max(1.0, np.abs(np.linalg.eigvals(a)).max())
            cert = power_norm_certificate(a)
            assert cert is not None
            for t in range(0, 25):
                nt = np.linalg.norm(np.linalg.matrix_power(a, t), 2)
                assert nt <= cert.c_a * cert.phi**t + 1e-9


class TestSpectrumBounds:
    def test_vs_eigvalsh(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            n = int(rng.integers(1, 6))
            h = random_spd(rng, n, scale=0.1)
            lo, hi = symmetric_eig_bounds(h)
            ev = np.linalg.eigvalsh(h)
            assert lo <= ev[0] + 1e-12
            assert hi >= ev[-1] - 1e-12
            assert lo >= ev[0] * 0.95 - 1e-9
            assert hi <= ev[-1] * 1.05 + 1e-9

    def test_zero_matrix(self):
        lo, hi = symmetric_eig_bounds(np.zeros((3, 3)))
        assert lo == 0.0 and hi == 0.0

    def test_spectral_norm_upper(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            m = rng.standard_normal((4, 3))
            true = np.linalg.norm(m, 2)
            hi = spectral_norm_upper(m)
            assert true - 1e-12 <= hi <= true * 1.05 + 1e-9
