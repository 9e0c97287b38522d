"""Data-informed subspace construction, projection, and the projected posterior.

The subspace is spanned by the dominant eigenvectors of the ensemble-averaged
Gauss-Newton likelihood curvature preconditioned by the prior covariance.
Basis columns are orthonormal in the prior-precision inner product, so the
projection coefficients of a prior sample are standard normal.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .linalg import (DEFAULT_OVERSAMPLE, DEFAULT_POWER_ITERS, SymmetricOperator,
                     randomized_generalized_eig, truncate_by_tolerance)


@dataclass(frozen=True)
class SubspaceBasis:
    """Reduced basis with cached prior-precision products.

    ``psi`` is (d, r) with columns ordered by descending |eigenvalue| and
    psi^T C^{-1} psi = I; ``psi_prec`` caches C^{-1} psi so projections are
    a single matmul.
    """

    psi: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    prior: object
    psi_prec: np.ndarray

    @property
    def rank(self):
        return self.psi.shape[1]

    def leading(self, r):
        """Sub-basis of the r leading columns."""
        return SubspaceBasis(psi=self.psi[:, :r],
                             eigenvalues=self.eigenvalues[:r],
                             mean=self.mean, prior=self.prior,
                             psi_prec=self.psi_prec[:, :r])


@dataclass(frozen=True)
class ProjectedState:
    """Coefficients plus the frozen complement component of one sample."""

    w: np.ndarray
    x_perp: np.ndarray


def build_basis(model, ensemble, eps_lambda, max_rank, seed=0,
                oversample=DEFAULT_OVERSAMPLE, power_iters=DEFAULT_POWER_ITERS):
    """Basis from the ensemble-averaged Gauss-Newton likelihood curvature.

    Averages J^T G^{-1} J over the ensemble (a single point suffices for a
    linear forward map), solves the prior-preconditioned eigenvalue problem
    with the randomized solver, and truncates at |lambda| >= eps_lambda.
    """
    ensemble = np.atleast_2d(np.asarray(ensemble, dtype=float))
    n, d = ensemble.shape
    if max_rank > d:
        max_rank = d
    oversample = min(oversample, d - max_rank)
    points = ensemble[:1] if model.hessian_is_constant else ensemble
    chunk = 128

    def averaged_action(v):
        v = np.asarray(v, dtype=float)
        single = v.ndim == 1
        cols = v[:, None] if single else v
        acc = np.zeros_like(cols)
        for lo in range(0, points.shape[0], chunk):
            block = points[lo:lo + chunk]
            jv = model.jacobian_action_batch(block, cols)     # (B, s, k)
            if model.noise.diag is not None:
                jv = jv / model.noise.diag[None, :, None]
            else:
                jv = np.stack([model.noise.precision_apply(m) for m in jv])
            acc += model.jacobian_transpose_action_batch(block,
                                                         jv).sum(axis=0)
        acc /= points.shape[0]
        return acc[:, 0] if single else acc

    operator = SymmetricOperator(dim=d, action=averaged_action)
    pairs = randomized_generalized_eig(
        operator, model.prior.chol, target_rank=max_rank,
        oversample=oversample, power_iters=power_iters, seed=seed)
    pairs = truncate_by_tolerance(pairs, eps_lambda)
    psi = pairs.vectors
    return SubspaceBasis(psi=psi, eigenvalues=pairs.values,
                         mean=model.prior.mean, prior=model.prior,
                         psi_prec=model.prior.apply_inverse(psi))


def project(basis, x):
    """Split x into coefficients w and the complement x_perp.

    w = psi^T C^{-1} (x - mean); the complement (x - mean) - psi w is
    C^{-1}-orthogonal to the basis.
    """
    centered = np.asarray(x, dtype=float) - basis.mean
    w = basis.psi_prec.T @ centered
    return ProjectedState(w=w, x_perp=centered - basis.psi @ w)


def reconstruct(basis, state):
    """Inverse of project: mean + psi w + x_perp."""
    return basis.mean + basis.psi @ state.w + state.x_perp


def project_ensemble(basis, ensemble):
    """Vectorized projection of an (N, d) ensemble -> (W, X_perp)."""
    centered = np.asarray(ensemble, dtype=float) - basis.mean
    w = centered @ basis.psi_prec
    return w, centered - w @ basis.psi.T


def reconstruct_ensemble(basis, w, x_perp):
    return basis.mean + w @ basis.psi.T + x_perp


def lift(basis, w):
    """Reduced point mapped to full space without a complement: mean + psi w."""
    return basis.mean + basis.psi @ np.asarray(w, dtype=float)


def gradient_and_curvature(model, basis, w):
    """Gradient of the reduced log-density and its positive GN curvature.

    With x = mean + psi w and standard-normal coefficient prior:
        grad = (J psi)^T G^{-1} (y - f(x)) - w
        curv = (J psi)^T G^{-1} (J psi) + I       (= -hessian)
    """
    x = lift(basis, w)
    res = model.residual(x)
    jpsi = model.jacobian_matrix(x) @ basis.psi
    weighted = model.noise.precision_apply(jpsi)
    grad = jpsi.T @ model.noise.precision_apply(res) - w
    curv = jpsi.T @ weighted + np.eye(basis.rank)
    return grad, curv


def projected_log_density(model, basis, w):
    """Unnormalized log-density of the reduced posterior at coefficients w."""
    w = np.asarray(w, dtype=float)
    return -model.likelihood_potential(lift(basis, w)) - 0.5 * float(w @ w)


def projected_gradient(model, basis, w):
    grad, _ = gradient_and_curvature(model, basis, np.asarray(w, dtype=float))
    return grad


def projected_hessian(model, basis, w):
    """Hessian of the reduced log-density (negative definite)."""
    _, curv = gradient_and_curvature(model, basis, np.asarray(w, dtype=float))
    return -curv


def export_basis_csv(basis, eigenvalues_path, basis_path):
    """Write eigenvalues and the basis matrix (column-major) as CSV."""
    with open(eigenvalues_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "eigenvalue"])
        for i, val in enumerate(basis.eigenvalues):
            writer.writerow([i, repr(float(val))])
    with open(basis_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["column", "entry", "value"])
        for j in range(basis.rank):
            for i in range(basis.psi.shape[0]):
                writer.writerow([j, i, repr(float(basis.psi[i, j]))])
