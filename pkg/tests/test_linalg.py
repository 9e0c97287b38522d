"""Factorization and randomized generalized eigensolver checks."""

import numpy as np
import pytest
import scipy.linalg

from pstein.exceptions import NotPositiveDefinite, RankExceedsDimension
from pstein.linalg import (EigenPairs, SymmetricOperator, cholesky_factor,
                           randomized_generalized_eig, solve_tridiagonal,
                           truncate_by_tolerance)


class TestCholeskyFactor:
    def test_identity(self):
        np.testing.assert_allclose(cholesky_factor(np.eye(3)), np.eye(3))

    def test_diagonal_square_roots(self):
        L = cholesky_factor(np.diag([4.0, 9.0]))
        np.testing.assert_allclose(L, np.diag([2.0, 3.0]))

    def test_reconstructs_prior_covariance(self, linear17):
        """L L^T must reproduce the assembled prior covariance."""
        cov = linear17.prior.cov
        L = cholesky_factor(cov)
        rel = np.linalg.norm(L @ L.T - cov) / np.linalg.norm(cov)
        assert rel < 1e-10

    def test_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_factor(np.array([[1.0, 0.0], [0.0, -2.0]]))

    def test_rejects_asymmetric(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_factor(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestSolveTridiagonal:
    def test_matches_dense_solve(self, rng):
        d = 40
        lower = rng.uniform(-0.3, 0.0, d - 1)
        upper = rng.uniform(-0.3, 0.0, d - 1)
        diag = np.full(d, 2.0)
        dense = np.diag(diag) + np.diag(lower, -1) + np.diag(upper, 1)
        b = rng.standard_normal(d)
        np.testing.assert_allclose(solve_tridiagonal(lower, diag, upper, b),
                                   np.linalg.solve(dense, b), rtol=1e-12)


def _operator_from_matrix(h):
    return SymmetricOperator(dim=h.shape[0], action=lambda v: h @ v)


class TestRandomizedGeneralizedEig:
    def test_whitened_identity(self, rng):
        """H equal to the covariance inverse has all eigenvalues 1."""
        d = 20
        a = rng.standard_normal((d, d))
        cov = a @ a.T + d * np.eye(d)
        h = np.linalg.inv(cov)
        h = 0.5 * (h + h.T)
        pairs = randomized_generalized_eig(
            _operator_from_matrix(h), np.linalg.cholesky(cov),
            target_rank=5, seed=0)
        np.testing.assert_allclose(pairs.values, np.ones(5), atol=1e-8)

    def test_rank_one_analytic(self, rng):
        """For H = h h^T the top eigenvalue is h^T cov h, the rest vanish."""
        d = 30
        a = rng.standard_normal((d, d))
        cov = a @ a.T + d * np.eye(d)
        hvec = rng.standard_normal(d)
        h = np.outer(hvec, hvec)
        pairs = randomized_generalized_eig(
            _operator_from_matrix(h), np.linalg.cholesky(cov),
            target_rank=4, seed=3)
        assert abs(pairs.values[0] - hvec @ cov @ hvec) \
            < 1e-8 * abs(hvec @ cov @ hvec)
        assert np.max(np.abs(pairs.values[1:])) < 1e-8 * abs(pairs.values[0])

    def test_matches_dense_oracle_on_benchmark(self, linear65):
        """Top-10 eigenvalues agree with a dense generalized eigensolve."""
        A = linear65.forward_matrix
        h = A.T @ (A / linear65.noise.diag[:, None])
        pairs = randomized_generalized_eig(
            _operator_from_matrix(h), linear65.prior.chol,
            target_rank=10, seed=1)
        dense = scipy.linalg.eigh(h, linear65.prior_precision,
                                  eigvals_only=True)[::-1][:10]
        np.testing.assert_allclose(pairs.values, dense, rtol=1e-6)

    def test_prior_orthonormal_vectors(self, linear65):
        A = linear65.forward_matrix
        h = A.T @ (A / linear65.noise.diag[:, None])
        pairs = randomized_generalized_eig(
            _operator_from_matrix(h), linear65.prior.chol,
            target_rank=8, seed=2)
        gram = pairs.vectors.T @ linear65.prior.apply_inverse(pairs.vectors)
        np.testing.assert_allclose(gram, np.eye(8), atol=1e-8)

    def test_pencil_residual_top_half(self, linear65):
        """Residual ||H psi - lambda C^{-1} psi|| is small for leading pairs."""
        A = linear65.forward_matrix
        h = A.T @ (A / linear65.noise.diag[:, None])
        pairs = randomized_generalized_eig(
            _operator_from_matrix(h), linear65.prior.chol,
            target_rank=10, seed=4)
        for i in range(5):
            psi = pairs.vectors[:, i]
            lam = pairs.values[i]
            rhs = linear65.prior.apply_inverse(psi)
            rel = np.linalg.norm(h @ psi - lam * rhs) \
                / (abs(lam) * np.linalg.norm(rhs))
            assert rel < 1e-5

    def test_deterministic_for_fixed_seed(self, rng):
        d = 25
        a = rng.standard_normal((d, d))
        cov = a @ a.T + d * np.eye(d)
        h = a @ a.T
        op = _operator_from_matrix(h)
        L = np.linalg.cholesky(cov)
        p1 = randomized_generalized_eig(op, L, target_rank=6, seed=9)
        p2 = randomized_generalized_eig(op, L, target_rank=6, seed=9)
        assert np.array_equal(p1.values, p2.values)
        assert np.array_equal(p1.vectors, p2.vectors)

    def test_sign_convention(self, rng):
        d = 15
        a = rng.standard_normal((d, d))
        cov = a @ a.T + d * np.eye(d)
        h = a @ a.T
        pairs = randomized_generalized_eig(
            _operator_from_matrix(h), np.linalg.cholesky(cov),
            target_rank=5, seed=11)
        for col in pairs.vectors.T:
            assert col[np.argmax(np.abs(col))] > 0

    def test_sketch_size_guard(self):
        h = np.eye(6)
        with pytest.raises(RankExceedsDimension):
            randomized_generalized_eig(_operator_from_matrix(h), np.eye(6),
                                       target_rank=5, oversample=5)


class TestTruncateByTolerance:
    def test_threshold_crossing(self):
        pairs = EigenPairs(values=np.array([3.0, 0.5, 0.005]),
                           vectors=np.eye(3))
        kept = truncate_by_tolerance(pairs, 0.01)
        np.testing.assert_allclose(kept.values, [3.0, 0.5])
        assert kept.vectors.shape == (3, 2)

    def test_keeps_at_least_one(self):
        pairs = EigenPairs(values=np.array([1e-6, 1e-8]),
                           vectors=np.eye(2))
        kept = truncate_by_tolerance(pairs, 0.01)
        assert kept.rank == 1

    def test_benchmark_rank_in_window(self, linear257):
        """Retained dimension at tolerance 0.01 sits in the expected band."""
        A = linear257.forward_matrix
        h = A.T @ (A / linear257.noise.diag[:, None])
        pairs = randomized_generalized_eig(
            _operator_from_matrix(h), linear257.prior.chol,
            target_rank=15, seed=0)
        kept = truncate_by_tolerance(pairs, 0.01)
        assert 4 <= kept.rank <= 8
