import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lalqr import linalg
from lalqr.errors import DefinitenessError, DimensionError, NonFiniteError, StabilizabilityError
from lalqr.latent import build_companion

GOLDEN = (1 + math.sqrt(5)) / 2


def finite_horizon_oracle(a, b, q, r, steps=500):
    """Backward dynamic programming from P_T = 0; returns (P_0, K_0)."""
    P = np.zeros_like(q)
    K = None
    for _ in range(steps):
        K = np.linalg.solve(r + b.T @ P @ b, b.T @ P @ a)
        P = q + a.T @ P @ (a - b @ K)
        P = 0.5 * (P + P.T)
    return P, K


def random_system(rng, N, m):
    a = rng.uniform(-1, 1, (N, N))
    a *= 1.1 / max(1e-3, np.max(np.abs(np.linalg.eigvals(a))))  # mildly unstable is fine
    b = rng.uniform(-1, 1, (N, m))
    gq = rng.uniform(-1, 1, (N, N))
    gr = rng.uniform(-1, 1, (m, m))
    return a, b, np.eye(N) + gq @ gq.T, np.eye(m) + gr @ gr.T


class TestAsMatrix:
    def test_vector_becomes_column(self):
        assert linalg.as_matrix([1.0, 2.0]).shape == (2, 1)

    def test_scalar_becomes_1x1(self):
        assert linalg.as_matrix(3.0).shape == (1, 1)

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            linalg.as_matrix([[np.nan]])

    def test_rejects_3d(self):
        with pytest.raises(DimensionError):
            linalg.as_matrix(np.zeros((2, 2, 2)))


class TestEigen:
    def test_identity(self):
        dec = linalg.eigen(np.eye(2))
        np.testing.assert_allclose(dec.eigenvalues, [1, 1], atol=1e-12)

    def test_rotation(self):
        lam = linalg.eigen([[0.0, 1.0], [-1.0, 0.0]]).eigenvalues
        np.testing.assert_allclose(sorted(lam.imag), [-1, 1], atol=1e-12)
        np.testing.assert_allclose(lam.real, 0, atol=1e-12)

    def test_fibonacci(self):
        lam = linalg.eigen([[0.0, 1.0], [1.0, 1.0]]).eigenvalues
        np.testing.assert_allclose(lam.real, [GOLDEN, 1 - GOLDEN], atol=1e-12)

    def test_sorted_by_modulus(self):
        rng = np.random.default_rng(3)
        lam = linalg.eigen(rng.standard_normal((8, 8))).eigenvalues
        assert np.all(np.diff(np.abs(lam)) <= 1e-12)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            linalg.eigen(np.zeros((2, 3)))

    def test_too_large(self):
        with pytest.raises(DimensionError):
            linalg.eigenvalues(np.eye(linalg.MAX_SIDE + 1))

    def test_residual_bound_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 33))
            a = rng.uniform(-1, 1, (n, n))
            dec = linalg.eigen(a)
            bound = 1e-8 * (1 + np.linalg.norm(a))
            assert np.max(dec.residuals(a)) <= bound
            np.testing.assert_allclose(np.linalg.norm(dec.eigenvectors, axis=0), 1.0, atol=1e-10)

    def test_matches_numpy_spectrum(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((12, 12))
        ours = np.sort_complex(linalg.eigenvalues(a))
        ref = np.sort_complex(np.linalg.eigvals(a))
        np.testing.assert_allclose(ours, ref, atol=1e-9)


class TestSpectralRadius:
    def test_examples(self):
        assert linalg.spectral_radius(np.eye(3)) == pytest.approx(1.0)
        assert linalg.spectral_radius([[0.0, 1.0], [0.0, 0.0]]) == pytest.approx(0.0, abs=1e-12)
        assert linalg.spectral_radius([[0.0, 1.0], [1.0, 1.0]]) == pytest.approx(GOLDEN, abs=1e-12)


class TestDare:
    def test_zero_dynamics(self):
        q0 = np.diag([2.0, 3.0])
        sol = linalg.dare_solve(np.zeros((2, 2)), np.ones((2, 1)), q0, np.eye(1))
        np.testing.assert_allclose(sol.P, q0, atol=1e-12)
        np.testing.assert_allclose(sol.K, 0.0, atol=1e-12)

    def test_scalar_golden_ratio(self):
        sol = linalg.dare_solve(1.0, 1.0, 1.0, 1.0)
        assert sol.P[0, 0] == pytest.approx(GOLDEN, abs=1e-9)
        assert sol.K[0, 0] == pytest.approx(GOLDEN - 1, abs=1e-9)

    def test_geometric_series(self):
        sol = linalg.dare_solve(0.5, 0.0, 1.0, 1.0)
        assert sol.P[0, 0] == pytest.approx(4 / 3, abs=1e-9)
        assert sol.K[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_uncontrollable_unstable_rejected(self):
        with pytest.raises(StabilizabilityError):
            linalg.dare_solve(2.0, 0.0, 1.0, 1.0)

    def test_indefinite_r_rejected(self):
        with pytest.raises(DefinitenessError):
            linalg.dare_solve(1.0, 1.0, 1.0, -1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            linalg.dare_solve(np.eye(2), np.ones((3, 1)), np.eye(2), np.eye(1))

    def test_finite_horizon_oracle_and_fixed_point(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            N, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            a, b, q, r = random_system(rng, N, m)
            sol = linalg.dare_solve(a, b, q, r)
            P0, K0 = finite_horizon_oracle(a, b, q, r)
            assert np.linalg.norm(sol.P - P0) <= 1e-6
            assert np.max(np.abs(sol.K - K0)) <= 1e-6
            P_next, _ = linalg.riccati_map(sol.P, a, b, q, r)
            assert np.linalg.norm(P_next - sol.P) <= 1e-8 * max(1, np.linalg.norm(sol.P))
            assert linalg.spectral_radius(a - b @ sol.K) < 1


class TestControllability:
    def test_double_integrator(self):
        assert linalg.controllability_rank([[1.0, 1.0], [0.0, 1.0]], [0.0, 1.0]) == 2

    def test_decoupled(self):
        assert linalg.controllability_rank(np.eye(2), [1.0, 0.0]) == 1

    def test_zero_companion(self):
        A, B = build_companion(4, 2).matrices()
        assert linalg.controllability_rank(A, B) == 4

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5), st.integers(1, 3))
    def test_similarity_invariance(self, seed, N, m):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((N, N))
        b = rng.standard_normal((N, m))
        if rng.random() < 0.5:
            b[:, :] = 0.0
            b[0, 0] = 1.0
            a = np.diag(rng.uniform(0.5, 1.5, N))  # usually rank-deficient pair
        u, _, vt = np.linalg.svd(rng.standard_normal((N, N)))
        t = u @ np.diag(rng.uniform(0.5, 2.0, N)) @ vt
        ti = np.linalg.inv(t)
        assert linalg.controllability_rank(t @ a @ ti, t @ b) == linalg.controllability_rank(a, b)
