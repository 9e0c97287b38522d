"""Gaussian kernel with a curvature-averaged metric.

k(a, b) = exp(-0.5 (a-b)^T M (a-b)) with M the ensemble-averaged negative
log-density Hessian divided by the (sub)space dimension.  In reduced
coordinates M is a small dense matrix; in full-space mode it may be kept
as an operator to avoid densifying J^T G^{-1} J + C^{-1} in high dimension.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatch

FULL_METRIC_DENSE_CUTOFF = 1024


@dataclass(frozen=True)
class KernelMetric:
    """S.p.d. kernel metric, dense or matrix-free."""

    dim: int
    divisor: int
    matrix: np.ndarray | None = None
    apply_fn: object = None

    def matmat(self, v):
        if self.matrix is not None:
            return self.matrix @ v
        return self.apply_fn(v)


@dataclass(frozen=True)
class KernelTable:
    """Kernel values and first-slot gradients over an ensemble.

    values[m, n] = k(w_m, w_n); gradients[m, n] = grad_1 k evaluated at w_m
    with center w_n, i.e. -M (w_m - w_n) k(w_m, w_n).
    """

    values: np.ndarray
    gradients: np.ndarray


def build_metric(curvatures):
    """Average positive curvature matrices and divide by their dimension.

    ``curvatures`` is a list or (N, r, r) stack of negative log-density
    Hessians (Gauss-Newton likelihood part plus the identity from the
    standard-normal coefficient prior), so the result is s.p.d.
    """
    stack = np.asarray(curvatures, dtype=float)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.shape[0] < 1 or stack.shape[1] != stack.shape[2]:
        raise DimensionMismatch("need at least one square curvature matrix")
    r = stack.shape[1]
    m = stack.mean(axis=0) / r
    return KernelMetric(dim=r, divisor=r, matrix=0.5 * (m + m.T))


def build_full_metric(model, ensemble, dense_cutoff=FULL_METRIC_DENSE_CUTOFF):
    """Full-space metric (averaged GN curvature of -log posterior) / d.

    Dense up to ``dense_cutoff``; above that the metric stays matrix-free
    through the per-particle Jacobians and the prior precision.
    """
    ensemble = np.atleast_2d(ensemble)
    d = ensemble.shape[1]
    points = ensemble[:1] if model.hessian_is_constant else ensemble
    jacs = [model.jacobian_matrix(x) for x in points]

    def apply_fn(v):
        acc = model.prior.apply_inverse(v) * len(jacs)
        for jac in jacs:
            acc += jac.T @ model.noise.precision_apply(jac @ v)
        return acc / (len(jacs) * d)

    if d <= dense_cutoff:
        dense = apply_fn(np.eye(d))
        return KernelMetric(dim=d, divisor=d, matrix=0.5 * (dense + dense.T))
    return KernelMetric(dim=d, divisor=d, apply_fn=apply_fn)


def identity_metric(dim, alpha=None):
    """Rescaled identity metric, the untuned baseline choice."""
    scale = (1.0 / dim) if alpha is None else alpha
    return KernelMetric(dim=dim, divisor=dim, matrix=scale * np.eye(dim))


def kernel_values(metric, points, centers=None):
    """Kernel matrix k(points_m, centers_n) without gradient storage.

    Uses the quadratic-form expansion, so no pairwise difference tensor is
    materialized; also returns the metric products M @ points / M @ centers
    for callers that assemble gradient sums themselves.
    """
    points = np.atleast_2d(points)
    same = centers is None
    centers = points if same else np.atleast_2d(centers)
    mp = metric.matmat(points.T).T
    mc = mp if same else metric.matmat(centers.T).T
    qp = np.einsum("mi,mi->m", points, mp)
    qc = qp if same else np.einsum("ni,ni->n", centers, mc)
    sq = qp[:, None] + qc[None, :] - 2.0 * points @ mc.T
    values = np.exp(-0.5 * np.maximum(sq, 0.0))
    if same:
        np.fill_diagonal(values, 1.0)
    return values, mp, mc


def evaluate_kernel_rows(metric, points, centers=None):
    """Row block of the kernel table: values and grad_1 k at the points.

    values[a, n] = k(p_a, c_n); gradients[a, n] = -M (p_a - c_n) values[a, n].
    With centers omitted the points serve as their own centers, which makes
    the diagonal exactly (1, 0).
    """
    values, mp, mc = kernel_values(metric, points, centers)
    gradients = -(mp[:, None, :] - mc[None, :, :]) * values[:, :, None]
    return values, gradients


def evaluate_kernel_table(metric, ensemble_coeffs):
    """Full kernel table over an ensemble of coefficient vectors."""
    ensemble_coeffs = np.atleast_2d(ensemble_coeffs)
    if metric.dim != ensemble_coeffs.shape[1]:
        raise DimensionMismatch("metric dimension does not match coefficients")
    values, gradients = evaluate_kernel_rows(metric, ensemble_coeffs)
    return KernelTable(values=values, gradients=gradients)
