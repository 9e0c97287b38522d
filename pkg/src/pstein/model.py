"""Bayesian inverse-problem abstraction.

Gaussian prior, Gaussian observation noise, and the unnormalized posterior
log-density with gradient and Gauss-Newton Hessian actions.  Normalization
constants are dropped everywhere: only differences of log-densities are
ever consumed (line searches, MCMC acceptance).
"""

import numpy as np
import scipy.linalg

from .exceptions import ForwardSolveFailure
from .linalg import cholesky_factor


class GaussianPrior:
    """Gaussian prior N(mean, cov) with a cached Cholesky factor.

    Exposes the three covariance actions the rest of the package needs:
    apply (cov @ v), apply_inverse (cov^{-1} @ v), and factor_apply (L @ v
    with L L^T = cov).
    """

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.dim = self.mean.shape[0]
        if self.cov.shape != (self.dim, self.dim):
            raise ValueError("covariance shape does not match mean")
        self.chol = cholesky_factor(self.cov)
        self._cho = (self.chol, True)

    def apply(self, v):
        return self.cov @ v

    def apply_inverse(self, v):
        return scipy.linalg.cho_solve(self._cho, v)

    def factor_apply(self, v):
        return self.chol @ v

    def quadform_inv(self, v):
        """v^T cov^{-1} v, evaluated through the cached factor."""
        w = scipy.linalg.solve_triangular(self.chol, v, lower=True)
        return float(w @ w)


class GaussianNoise:
    """Zero-mean Gaussian observation noise with s.p.d. covariance.

    The covariance may be given as a scalar (sigma^2 * I), a vector of
    per-observation variances, or a full matrix.
    """

    def __init__(self, cov, dim=None):
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            if dim is None:
                raise ValueError("scalar covariance needs an explicit dim")
            self.diag = np.full(dim, float(cov))
            self._chol = None
        elif cov.ndim == 1:
            self.diag = cov.copy()
            self._chol = None
        else:
            self.diag = None
            self._full = cov.copy()
            self._chol = cholesky_factor(cov)
        self.dim = dim if dim is not None else (
            self.diag.shape[0] if self.diag is not None else cov.shape[0])

    def precision_apply(self, v):
        if self.diag is not None:
            v = np.asarray(v, dtype=float)
            if v.ndim == 1:
                return v / self.diag
            return v / self.diag[:, None]
        return scipy.linalg.cho_solve((self._chol, True), v)

    def precision_apply_rows(self, v):
        """Precision applied to each row of an (N, s) batch."""
        v = np.asarray(v, dtype=float)
        if self.diag is not None:
            return v / self.diag[None, :]
        return scipy.linalg.cho_solve((self._chol, True), v.T).T

    def norm_sq(self, v):
        """Squared noise-precision norm v^T cov^{-1} v (>= 0, 0 iff v = 0)."""
        return float(np.asarray(v) @ self.precision_apply(v))


class PosteriorModel:
    """Forward map plus prior and noise, with derivative actions.

    ``forward_fn`` maps x (d,) to observations (s,).  ``jacobian_fn``
    returns the dense Jacobian (s, d) at x; the vector actions are derived
    from it.  ``hessian_is_constant`` marks linear forward maps so callers
    can reuse curvature across evaluation points.
    """

    def __init__(self, prior, noise, data, forward_fn, jacobian_fn,
                 forward_batch_fn=None, jacobian_batch_fn=None,
                 jacobian_action_batch_fn=None,
                 jacobian_transpose_action_batch_fn=None,
                 hessian_is_constant=False, name=""):
        self.prior = prior
        self.noise = noise
        self.data = np.asarray(data, dtype=float)
        self._forward = forward_fn
        self._jacobian = jacobian_fn
        self._forward_batch = forward_batch_fn
        self._jacobian_batch = jacobian_batch_fn
        self._jacobian_action_batch = jacobian_action_batch_fn
        self._jacobian_transpose_action_batch = \
            jacobian_transpose_action_batch_fn
        self.hessian_is_constant = hessian_is_constant
        self.name = name
        self.dim = prior.dim
        self.obs_dim = self.data.shape[0]

    def forward(self, x):
        out = np.asarray(self._forward(np.asarray(x, dtype=float)), dtype=float)
        if not np.all(np.isfinite(out)):
            raise ForwardSolveFailure(f"non-finite forward output ({self.name})")
        return out

    def forward_batch(self, xs):
        """Forward map over an (N, d) batch of points."""
        xs = np.asarray(xs, dtype=float)
        if self._forward_batch is not None:
            out = np.asarray(self._forward_batch(xs), dtype=float)
        else:
            out = np.stack([np.asarray(self._forward(x), dtype=float)
                            for x in xs])
        if not np.all(np.isfinite(out)):
            raise ForwardSolveFailure(f"non-finite forward output ({self.name})")
        return out

    def jacobian_batch(self, xs):
        """Stack of dense Jacobians, shape (N, s, d)."""
        xs = np.asarray(xs, dtype=float)
        if self._jacobian_batch is not None:
            return np.asarray(self._jacobian_batch(xs), dtype=float)
        return np.stack([np.asarray(self._jacobian(x), dtype=float)
                         for x in xs])

    def jacobian_action_batch(self, xs, v):
        """J(x_b) @ v for every point in an (N, d) batch; v is (d, k).

        Problems can supply a dedicated implementation that avoids
        materializing the Jacobian stack; the fallback goes through
        ``jacobian_batch``.
        """
        xs = np.asarray(xs, dtype=float)
        if self._jacobian_action_batch is not None:
            return np.asarray(self._jacobian_action_batch(xs, v), dtype=float)
        return self.jacobian_batch(xs) @ v

    def jacobian_transpose_action_batch(self, xs, u):
        """J(x_b)^T @ u_b for a batch; u has shape (N, s) or (N, s, k)."""
        xs = np.asarray(xs, dtype=float)
        u = np.asarray(u, dtype=float)
        if self._jacobian_transpose_action_batch is not None:
            return np.asarray(self._jacobian_transpose_action_batch(xs, u),
                              dtype=float)
        jac = self.jacobian_batch(xs)
        if u.ndim == 2:
            return np.einsum("bsd,bs->bd", jac, u)
        return np.einsum("bsd,bsk->bdk", jac, u)

    def residual(self, x):
        return self.data - self.forward(x)

    def jacobian_matrix(self, x):
        return np.asarray(self._jacobian(np.asarray(x, dtype=float)), dtype=float)

    def jacobian_action(self, x, v):
        return self.jacobian_matrix(x) @ v

    def jacobian_transpose_action(self, x, u):
        return self.jacobian_matrix(x).T @ u

    def likelihood_potential(self, x):
        """Negative log-likelihood 0.5 ||y - f(x)||^2 in the noise norm."""
        return 0.5 * self.noise.norm_sq(self.residual(x))

    def log_unnormalized_posterior(self, x):
        dx = np.asarray(x, dtype=float) - self.prior.mean
        return -self.likelihood_potential(x) - 0.5 * self.prior.quadform_inv(dx)

    def grad_log_posterior(self, x):
        x = np.asarray(x, dtype=float)
        res = self.residual(x)
        jac = self.jacobian_matrix(x)
        return jac.T @ self.noise.precision_apply(res) \
            - self.prior.apply_inverse(x - self.prior.mean)

    def gauss_newton_hessian_action(self, x, v):
        """(J^T G^{-1} J + C^{-1}) v: Gauss-Newton curvature of -log posterior.

        Exact when the forward map is linear; near the posterior mode the
        dropped second-derivative term is small but measurable for
        nonlinear maps.
        """
        jac = self.jacobian_matrix(x)
        v = np.asarray(v, dtype=float)
        return jac.T @ self.noise.precision_apply(jac @ v) \
            + self.prior.apply_inverse(v)

    def gn_likelihood_hessian_action(self, x, v):
        """Likelihood part only: J^T G^{-1} J v."""
        jac = self.jacobian_matrix(x)
        return jac.T @ self.noise.precision_apply(jac @ np.asarray(v, dtype=float))


def sample_prior(prior, count, seed):
    """Draw ``count`` prior samples, one substream per sample index.

    Sample i is mean + L z_i with z_i from np.random.default_rng((seed, i)),
    so a fixed global seed yields the same particle regardless of how the
    ensemble is partitioned across workers.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty((count, prior.dim))
    for i in range(count):
        z = np.random.default_rng((seed, i)).standard_normal(prior.dim)
        out[i] = prior.mean + prior.chol @ z
    return out


def zero_forward_model(prior, obs_dim=1, noise_var=1.0):
    """Model whose forward map is identically zero (posterior == prior)."""
    zeros = np.zeros(obs_dim)
    jac = np.zeros((obs_dim, prior.dim))
    return PosteriorModel(
        prior=prior,
        noise=GaussianNoise(noise_var, dim=obs_dim),
        data=zeros,
        forward_fn=lambda x: zeros,
        jacobian_fn=lambda x: jac,
        hessian_is_constant=True,
        name="zero-forward",
    )
