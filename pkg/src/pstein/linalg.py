"""Dense and structured linear algebra used by the rest of the package.

Provides symmetric factorization, tridiagonal solves, and a randomized
solver for the generalized symmetric eigenvalue problem
``H psi = lambda * C^{-1} psi`` with a prior covariance ``C``.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .exceptions import BreakdownInQR, NotPositiveDefinite, RankExceedsDimension

DEFAULT_OVERSAMPLE = 10
DEFAULT_POWER_ITERS = 2


@dataclass(frozen=True)
class SymmetricOperator:
    """Matrix-free symmetric operator.

    ``action`` maps a vector of shape (dim,) to a vector of shape (dim,);
    it must also accept a stack of columns of shape (dim, k) and apply
    itself columnwise.  Callers supply actions that are safe to invoke
    concurrently, or serialize access themselves.
    """

    dim: int
    action: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v):
        out = self.action(v)
        return np.asarray(out, dtype=float)


@dataclass(frozen=True)
class EigenPairs:
    """Generalized eigenpairs sorted by descending absolute eigenvalue.

    ``vectors`` has shape (d, r) with columns orthonormal in the
    C^{-1} inner product of the covariance used to compute them.
    """

    values: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 1 or self.vectors.ndim != 2:
            raise ValueError("values must be 1-d and vectors 2-d")
        if self.vectors.shape[1] != self.values.shape[0]:
            raise ValueError("inconsistent number of eigenpairs")

    @property
    def rank(self):
        return self.values.shape[0]


def cholesky_factor(matrix):
    """Lower-triangular Cholesky factor of an s.p.d. matrix.

    Raises NotPositiveDefinite when the factorization encounters a
    non-positive pivot (which also catches asymmetric garbage input).
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise NotPositiveDefinite("input is not a square matrix")
    if not np.allclose(matrix, matrix.T, rtol=1e-10, atol=1e-12):
        raise NotPositiveDefinite("input matrix is not symmetric")
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def solve_tridiagonal(lower, diag, upper, b):
    """Solve a tridiagonal system given its three bands.

    ``lower`` and ``upper`` have length d-1; ``b`` may be a vector or a
    matrix of right-hand sides.
    """
    diag = np.asarray(diag, dtype=float)
    d = diag.shape[0]
    ab = np.zeros((3, d))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    return scipy.linalg.solve_banded((1, 1), ab, b)


def _fix_signs(vectors):
    """Make the largest-magnitude entry of each column positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def randomized_generalized_eig(hessian, prior_factor, target_rank,
                               oversample=DEFAULT_OVERSAMPLE,
                               power_iters=DEFAULT_POWER_ITERS,
                               seed=0):
    """Top eigenpairs of the pencil (H, C^{-1}) by randomized sketching.

    The problem is whitened with the Cholesky factor L of the covariance
    C = L L^T: the standard symmetric problem L^T H L phi = lambda phi is
    sketched and solved by Rayleigh-Ritz, and eigenvectors are mapped back
    as psi = L phi, which makes them orthonormal in the C^{-1} inner
    product.  Deterministic for a fixed seed.

    Parameters
    ----------
    hessian : SymmetricOperator
        Symmetric positive-semidefinite operator H of dimension d.
    prior_factor : ndarray (d, d)
        Lower-triangular factor L of the covariance.
    target_rank : int
        Number of eigenpairs to return.
    oversample, power_iters : int
        Sketch surplus and number of subspace (power) iterations.
    seed : int
        Seed for the Gaussian sketch.
    """
    d = hessian.dim
    if target_rank < 1:
        raise ValueError("target_rank must be at least 1")
    if target_rank + oversample > d:
        raise RankExceedsDimension(
            f"sketch size {target_rank + oversample} exceeds dimension {d}")

    L = np.asarray(prior_factor, dtype=float)

    def whitened(v):
        return L.T @ hessian(L @ v)

    rng = np.random.default_rng(seed)
    for attempt in range(2):
        sketch = rng.standard_normal((d, target_rank + oversample))
        try:
            y = whitened(sketch)
            if not np.all(np.isfinite(y)):
                raise BreakdownInQR("sketch produced non-finite values")
            if np.linalg.norm(y) == 0.0:
                # operator is (numerically) zero: every direction is an
                # eigenvector with eigenvalue zero
                q, _ = np.linalg.qr(sketch)
                vals = np.zeros(q.shape[1])
                vecs = np.eye(q.shape[1])
                break
            for _ in range(power_iters):
                q, _ = np.linalg.qr(y)
                y = whitened(q)
            if not np.all(np.isfinite(y)):
                raise BreakdownInQR("sketch produced non-finite values")
            q, _ = np.linalg.qr(y)
            small = q.T @ whitened(q)
            small = 0.5 * (small + small.T)
            vals, vecs = np.linalg.eigh(small)
        except BreakdownInQR:
            if attempt == 1:
                raise
            continue
        break

    # stable sort keeps the sketch ordering for ties in |lambda|
    order = np.argsort(-np.abs(vals), kind="stable")[:target_rank]
    values = vals[order]
    phi = q @ vecs[:, order]
    psi = _fix_signs(L @ phi)
    return EigenPairs(values=values, vectors=psi)


def truncate_by_tolerance(pairs, eps_lambda):
    """Keep the leading eigenpairs with |lambda| >= eps_lambda, at least one."""
    magnitudes = np.abs(pairs.values)
    keep = int(np.sum(magnitudes >= eps_lambda))
    keep = max(keep, 1)
    return EigenPairs(values=pairs.values[:keep].copy(),
                      vectors=pairs.vectors[:, :keep].copy())
