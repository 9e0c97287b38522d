"""Benchmark inference problems with verifiable posteriors.

Two 1D problems on the unit interval:

* a linear source-inversion problem, -u'' + u = x with homogeneous
  Dirichlet data, observed pointwise, whose posterior is Gaussian in
  closed form;
* a lognormal flow problem, -(e^x u')' = 0 with u(0)=0, u(1)=1, whose
  solution map has the closed quadrature form
  u(s) = q * int_0^s e^{-x} dt, q = 1 / int_0^1 e^{-x} dt.

Both use a Gaussian random-field prior discretized from (I - 0.1 Lap)^-p
(p = 1 linear, p = 2 lognormal) in the point-evaluation normalization:
with the piecewise-linear mass matrix M and stiffness L on the full node
set (natural boundaries), the covariance is

    cov = Phi diag(kappa^-p) Phi^T,   (M + 0.1 L) phi_i = kappa_i M phi_i,

with Phi M-orthonormal, i.e. cov = (M + 0.1 L)^{-1} for p = 1.  Nodal
variances are then O(1) independent of the mesh, and ground-truth fields
synthesized per mode refine consistently with the mesh.

A preconditioned Crank-Nicolson sampler provides a reference posterior
for the nonlinear problem.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import SingularSystem
from .linalg import solve_tridiagonal
from .model import GaussianNoise, GaussianPrior, PosteriorModel

# substream domains so data synthesis never collides with particle draws
_TRUTH_STREAM = 101
_NOISE_STREAM = 202
_CHAIN_STREAM = 303
_INIT_STREAM = 404


def _fem_mass_bands(d):
    """Piecewise-linear mass matrix on the full node set, as bands."""
    h = 1.0 / (d - 1)
    diag = np.full(d, 2.0 * h / 3.0)
    diag[0] = diag[-1] = h / 3.0
    off = np.full(d - 1, h / 6.0)
    return off, diag, off


def _fem_stiffness_bands(d):
    """Piecewise-linear stiffness matrix on the full node set, as bands."""
    h = 1.0 / (d - 1)
    diag = np.full(d, 2.0 / h)
    diag[0] = diag[-1] = 1.0 / h
    off = np.full(d - 1, -1.0 / h)
    return off, diag, off


def _bands_to_dense(lower, diag, upper):
    return np.diag(diag) + np.diag(lower, -1) + np.diag(upper, 1)


def _prior_from_laplacian(d, power):
    """Gaussian prior discretized from (I - 0.1 Lap)^(-power).

    Solves the pencil (M + 0.1 L) phi = kappa M phi with M-orthonormal
    modes (low frequency first, signs fixed so entry 0 is positive) and
    sets cov = Phi kappa^(-power) Phi^T.  The modes approximate sqrt(2)
    cos(pi i t), so a fixed coefficient sequence produces mesh-consistent
    fields across dimensions, and nodal variances stay O(1) under mesh
    refinement.  Returns (prior, modes, mode_vars).
    """
    mass = _bands_to_dense(*_fem_mass_bands(d))
    stiff = _bands_to_dense(*_fem_stiffness_bands(d))
    kappa, phi = scipy.linalg.eigh(mass + 0.1 * stiff, mass)
    signs = np.sign(phi[0, :])
    signs[signs == 0] = 1.0
    phi = phi * signs
    mode_vars = kappa ** (-float(power))
    cov = (phi * mode_vars) @ phi.T
    cov = 0.5 * (cov + cov.T)
    prior = GaussianPrior(mean=np.zeros(d), cov=cov)
    return prior, phi, mode_vars


def _spectral_truth(phi, mode_vars, seed):
    """Ground-truth prior draw from per-mode substreams.

    Coefficient i comes from rng((seed, truth, i)), so refining the mesh
    refines the same random field instead of drawing a new one; the data
    scale then converges with dimension.
    """
    d = phi.shape[1]
    z = np.array([
        np.random.default_rng((seed, _TRUTH_STREAM, i)).standard_normal()
        for i in range(d)
    ])
    return phi @ (np.sqrt(mode_vars) * z)


def _observation_rows(d, s):
    """Interpolation rows for s equispaced observation points in (0, 1)."""
    h = 1.0 / (d - 1)
    points = np.arange(1, s + 1) / (s + 1.0)
    rows = np.zeros((s, d))
    for i, p in enumerate(points):
        k = min(int(np.floor(p / h)), d - 2)
        theta = p / h - k
        rows[i, k] = 1.0 - theta
        rows[i, k + 1] = theta
    return rows, points


@dataclass
class AnalyticGaussianPosterior:
    """Gaussian posterior mean and covariance."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def pointwise_variance(self):
        return np.diag(self.cov).copy()


@dataclass
class LinearPdeProblem:
    """Discretized linear inference problem with a Gaussian posterior."""

    n: int
    d: int
    s: int
    h: float
    forward_matrix: np.ndarray          # (s, d) dense map x -> observations
    obs_points: np.ndarray
    prior: GaussianPrior
    noise: GaussianNoise
    data: np.ndarray
    x_true: np.ndarray
    noise_sigma: float
    stiffness_bands: tuple
    mass_bands: tuple
    prior_precision: np.ndarray         # dense I + 0.1 Lap
    descriptor: dict = field(default_factory=dict)

    def forward(self, x):
        return self.forward_matrix @ x

    def jacobian(self, x):
        return self.forward_matrix

    @property
    def mass_matrix(self):
        lo, di, up = self.mass_bands
        return _bands_to_dense(lo, di, up)

    def posterior_model(self):
        A = self.forward_matrix
        return PosteriorModel(
            prior=self.prior, noise=self.noise, data=self.data,
            forward_fn=lambda x: A @ x,
            jacobian_fn=lambda x: A,
            forward_batch_fn=lambda xs: xs @ A.T,
            jacobian_batch_fn=lambda xs: np.broadcast_to(
                A, (xs.shape[0],) + A.shape),
            jacobian_action_batch_fn=lambda xs, v: np.broadcast_to(
                A @ v, (xs.shape[0],) + (A @ v).shape),
            hessian_is_constant=True,
            name="linear1d",
        )


def assemble_linear_problem(n, s=15, noise_pct=0.01, data_seed=0):
    """Assemble the linear problem on a uniform mesh of size 2^n.

    Parameter dimension is d = 2^n + 1.  Synthetic data: a ground-truth
    field is drawn from the prior with the given seed and observed with
    noise sigma = noise_pct * max_i |f(x_true)_i|.
    """
    if n < 2:
        raise ValueError("mesh exponent n must be >= 2")
    d = 2**n + 1
    h = 1.0 / (d - 1)

    stiff_off, stiff_diag, _ = _fem_stiffness_bands(d)
    mass_off, mass_diag, _ = _fem_mass_bands(d)

    # interior system (Dirichlet rows eliminated): K = (L + M) on nodes 1..d-2
    m = d - 2
    k_diag = stiff_diag[1:-1] + mass_diag[1:-1]
    k_off = (stiff_off + mass_off)[1:-1]

    obs_full, obs_points = _observation_rows(d, s)
    # boundary columns of the observation rows hit u = 0, so drop them
    obs_int = obs_full[:, 1:-1]

    # A = O K^{-1} B with B the interior rows of the mass matrix acting on
    # all d nodal values, assembled through s tridiagonal solves; interior
    # mass rows touching node j are j-2, j-1, j with weights (1, 4, 1) * h/6
    y_cols = solve_tridiagonal(k_off, k_diag, k_off, obs_int.T)   # (m, s)
    ypad = np.zeros((m + 4, s))
    ypad[2:2 + m] = y_cols
    A = (h / 6.0) * (ypad[0:d] + 4.0 * ypad[1:d + 1] + ypad[2:d + 2]).T

    # field driven by the inhomogeneous boundary value u(1) = 1; it sets the
    # observable signal scale and is subtracted from the raw observations so
    # the inference map stays linear
    rhs_bc = np.zeros(m)
    rhs_bc[-1] = -(stiff_off[-1] + mass_off[-1])
    lift = obs_int @ solve_tridiagonal(k_off, k_diag, k_off, rhs_bc)

    prior, phi, mode_vars = _prior_from_laplacian(d, power=1)
    x_true = _spectral_truth(phi, mode_vars, data_seed)
    clean = A @ x_true
    sigma = noise_pct * np.max(np.abs(clean + lift))
    noise_draw = np.array([
        np.random.default_rng((data_seed, _NOISE_STREAM, j)).standard_normal()
        for j in range(s)
    ])
    data = clean + sigma * noise_draw

    precision = _bands_to_dense(mass_off, mass_diag, mass_off) \
        + 0.1 * _bands_to_dense(stiff_off, stiff_diag, stiff_off)

    return LinearPdeProblem(
        n=n, d=d, s=s, h=h, forward_matrix=A, obs_points=obs_points,
        prior=prior, noise=GaussianNoise(sigma**2, dim=s), data=data,
        x_true=x_true, noise_sigma=sigma,
        stiffness_bands=(stiff_off, stiff_diag, stiff_off),
        mass_bands=(mass_off, mass_diag, mass_off),
        prior_precision=precision,
        descriptor={"kind": "linear1d", "n": n, "s": s,
                    "noise_pct": noise_pct, "data_seed": data_seed},
    )


def analytic_posterior(problem):
    """Closed-form Gaussian posterior of the linear problem.

    Posterior precision is A^T G^{-1} A + C^{-1}; the mean is the unique
    stationary point of the log-density,
    mean = prior_mean + cov_post A^T G^{-1} (y - A prior_mean).
    """
    A = problem.forward_matrix
    prec_noise = 1.0 / problem.noise.diag[:, None]
    lam = A.T @ (prec_noise * A) + problem.prior_precision
    lam = 0.5 * (lam + lam.T)
    try:
        cho = scipy.linalg.cho_factor(lam)
    except scipy.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    cov = scipy.linalg.cho_solve(cho, np.eye(problem.d))
    cov = 0.5 * (cov + cov.T)
    rhs = A.T @ problem.noise.precision_apply(
        problem.data - A @ problem.prior.mean)
    mean = problem.prior.mean + scipy.linalg.cho_solve(cho, rhs)
    return AnalyticGaussianPosterior(mean=mean, cov=cov)


def projected_analytic_posterior(problem, basis):
    """Gaussian posterior of the linear problem under a rank-r projection.

    The forward map is composed with the projection onto the basis (the
    complement of the parameter is frozen at the prior mean inside the
    likelihood), which keeps the posterior Gaussian and gives the exact
    distribution targeted by the reduced transport.
    """
    A = problem.forward_matrix
    a_proj = (A @ basis.psi) @ basis.psi_prec.T
    prec_noise = 1.0 / problem.noise.diag[:, None]
    lam = a_proj.T @ (prec_noise * a_proj) + problem.prior_precision
    lam = 0.5 * (lam + lam.T)
    try:
        cho = scipy.linalg.cho_factor(lam)
    except scipy.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    cov = scipy.linalg.cho_solve(cho, np.eye(problem.d))
    cov = 0.5 * (cov + cov.T)
    rhs = a_proj.T @ problem.noise.precision_apply(
        problem.data - A @ problem.prior.mean)
    mean = problem.prior.mean + scipy.linalg.cho_solve(cho, rhs)
    return AnalyticGaussianPosterior(mean=mean, cov=cov)


@dataclass
class LognormalFlowProblem:
    """1D lognormal flow problem with a closed-form solution map."""

    d: int
    s: int
    h: float
    obs_rows: np.ndarray
    obs_points: np.ndarray
    prior: GaussianPrior
    noise: GaussianNoise
    data: np.ndarray
    x_true: np.ndarray
    noise_sigma: float
    mass_bands: tuple
    descriptor: dict = field(default_factory=dict)

    def solution(self, x):
        """Nodal solution u of -(e^x u')' = 0, u(0)=0, u(1)=1.

        Trapezoid quadrature of e^{-x}; the boundary values are exact by
        construction and adding a constant to x leaves u unchanged.
        """
        g = np.exp(-np.asarray(x, dtype=float))
        inc = 0.5 * self.h * (g[..., :-1] + g[..., 1:])
        cum = np.cumsum(inc, axis=-1)
        total = cum[..., -1:]
        u = np.concatenate([np.zeros(cum.shape[:-1] + (1,)), cum], axis=-1)
        return u / total

    def forward(self, x):
        return self.solution(x) @ self.obs_rows.T

    def _support_weights(self):
        """Truncated-trapezoid weight rows for every observation support node.

        Cached: (nodes, trunc (K, d), w_full (d,)) with trunc[j] the
        quadrature weights of [0, t_k] for support node k = nodes[j].
        """
        if not hasattr(self, "_support_cache"):
            nodes = np.unique(np.nonzero(self.obs_rows)[1])
            w_full = np.ones(self.d)
            w_full[0] = w_full[-1] = 0.5
            trunc = np.zeros((nodes.size, self.d))
            for j, k in enumerate(nodes):
                if k > 0:
                    trunc[j, 0] = 0.5
                    trunc[j, 1:k] = 1.0
                    trunc[j, k] = 0.5
            self._support_cache = (nodes, trunc, w_full)
        return self._support_cache

    def jacobian_batch(self, xs):
        """Dense Jacobians for an (N, d) batch, shape (N, s, d).

        d u_k / d x_j = (h g_j / G) (u_k W_j - w_kj) with g = e^{-x}, G the
        full-interval quadrature of g, W the trapezoid weights, and w_k the
        same weights truncated at node k; observation rows interpolate the
        two neighbouring solution rows.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        nodes, trunc, w_full = self._support_weights()
        g = np.exp(-xs)
        inc = 0.5 * self.h * (g[:, :-1] + g[:, 1:])
        cum = np.concatenate([np.zeros((xs.shape[0], 1)),
                              np.cumsum(inc, axis=1)], axis=1)
        total = cum[:, -1:]
        u = cum / total
        scale = self.h * g / total                               # (B, d)
        # (B, K, d) solution-row derivatives at the support nodes
        du = scale[:, None, :] * (u[:, nodes, None] * w_full[None, None, :]
                                  - trunc[None, :, :])
        out = np.zeros((xs.shape[0], self.s, self.d))
        pos = {k: j for j, k in enumerate(nodes)}
        for i in range(self.s):
            for k in np.nonzero(self.obs_rows[i])[0]:
                out[:, i, :] += self.obs_rows[i, k] * du[:, pos[k], :]
        return out

    def jacobian(self, x):
        return self.jacobian_batch(np.asarray(x, dtype=float)[None])[0]

    def jacobian_transpose_action_batch(self, xs, u):
        """J(x_b)^T u_b over a batch; u is (B, s) or (B, s, k).

        Mirrors ``jacobian_action_batch``: the adjoint combines the same
        full-interval and truncated quadrature weights, so the work is one
        matrix product against the truncated-weight table.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        u = np.asarray(u, dtype=float)
        squeeze = u.ndim == 2
        if squeeze:
            u = u[:, :, None]
        nodes, trunc, w_full = self._support_weights()
        g = np.exp(-xs)
        inc = 0.5 * self.h * (g[:, :-1] + g[:, 1:])
        cum = np.concatenate([np.zeros((xs.shape[0], 1)),
                              np.cumsum(inc, axis=1)], axis=1)
        total = cum[:, -1:]
        usol = cum / total
        scale = self.h * g / total
        obs_sup = self.obs_rows[:, nodes]                       # (s, K)
        c_sup = np.einsum("bsq,st->btq", u, obs_sup)            # (B, K, q)
        term1 = np.einsum("btq,bt->bq", c_sup, usol[:, nodes])
        term2 = np.tensordot(c_sup, trunc, axes=([1], [0]))     # (B, q, d)
        out = scale[:, :, None] * (term1[:, None, :]
                                   * w_full[None, :, None]
                                   - np.swapaxes(term2, 1, 2))
        return out[:, :, 0] if squeeze else out

    def jacobian_action_batch(self, xs, v):
        """J(x_b) @ v over a batch without forming the Jacobians.

        Using the row formula, (J v)[b, i] combines u_k * (scale_b W) v and
        (scale_b trunc_k) v at the two support nodes of observation i; both
        terms reduce to matrix products of the batch against weight-masked
        copies of v, so the work is two BLAS calls instead of a
        bandwidth-bound (batch, nodes, d) tensor.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        nodes, trunc, w_full = self._support_weights()
        nb, k = xs.shape[0], nodes.size
        r = v.shape[1]
        g = np.exp(-xs)
        inc = 0.5 * self.h * (g[:, :-1] + g[:, 1:])
        cum = np.concatenate([np.zeros((nb, 1)), np.cumsum(inc, axis=1)],
                             axis=1)
        total = cum[:, -1:]
        u = cum / total
        scale = self.h * g / total
        sv = (scale * w_full) @ v                               # (B, r)
        masked = (trunc.T[:, :, None] * v[:, None, :]).reshape(self.d, k * r)
        tt = (scale @ masked).reshape(nb, k, r)                 # (B, K, r)
        pos = {node: j for j, node in enumerate(nodes)}
        out = np.zeros((nb, self.s, r))
        for i in range(self.s):
            for node in np.nonzero(self.obs_rows[i])[0]:
                weight = self.obs_rows[i, node]
                out[:, i, :] += weight * (u[:, node, None] * sv
                                          - tt[:, pos[node], :])
        return out

    @property
    def mass_matrix(self):
        lo, di, up = self.mass_bands
        return _bands_to_dense(lo, di, up)

    def posterior_model(self):
        return PosteriorModel(
            prior=self.prior, noise=self.noise, data=self.data,
            forward_fn=self.forward,
            jacobian_fn=self.jacobian,
            forward_batch_fn=self.forward,
            jacobian_batch_fn=self.jacobian_batch,
            jacobian_action_batch_fn=self.jacobian_action_batch,
            jacobian_transpose_action_batch_fn=
            self.jacobian_transpose_action_batch,
            hessian_is_constant=False,
            name="lognormal1d",
        )


def assemble_lognormal_problem(d, s=15, noise_pct=0.1, data_seed=0):
    """Assemble the lognormal flow problem on d mesh nodes."""
    if d < 9:
        raise ValueError("d must be >= 9")
    if not 1 <= s <= d - 2:
        raise ValueError("need 1 <= s <= d - 2")
    h = 1.0 / (d - 1)
    obs_rows, obs_points = _observation_rows(d, s)
    prior, phi, mode_vars = _prior_from_laplacian(d, power=2)
    mass_off, mass_diag, _ = _fem_mass_bands(d)

    problem = LognormalFlowProblem(
        d=d, s=s, h=h, obs_rows=obs_rows, obs_points=obs_points,
        prior=prior, noise=GaussianNoise(1.0, dim=s), data=np.zeros(s),
        x_true=np.zeros(d), noise_sigma=1.0,
        mass_bands=(mass_off, mass_diag, mass_off),
        descriptor={"kind": "lognormal1d", "d": d, "s": s,
                    "noise_pct": noise_pct, "data_seed": data_seed},
    )
    x_true = _spectral_truth(phi, mode_vars, data_seed)
    clean = problem.forward(x_true)
    sigma = noise_pct * np.max(np.abs(clean))
    noise_draw = np.array([
        np.random.default_rng((data_seed, _NOISE_STREAM, j)).standard_normal()
        for j in range(s)
    ])
    problem.data = clean + sigma * noise_draw
    problem.noise = GaussianNoise(sigma**2, dim=s)
    problem.noise_sigma = sigma
    problem.x_true = x_true
    return problem


def assemble_problem(descriptor):
    """Rebuild a problem from its JSON descriptor."""
    kind = descriptor["kind"]
    if kind == "linear1d":
        return assemble_linear_problem(
            descriptor["n"], s=descriptor.get("s", 15),
            noise_pct=descriptor.get("noise_pct", 0.01),
            data_seed=descriptor.get("data_seed", 0))
    if kind == "lognormal1d":
        return assemble_lognormal_problem(
            descriptor["d"], s=descriptor.get("s", 15),
            noise_pct=descriptor.get("noise_pct", 0.1),
            data_seed=descriptor.get("data_seed", 0))
    raise ValueError(f"unknown problem kind {kind!r}")


@dataclass
class PcnResult:
    """Ergodic moment estimates from a pCN chain."""

    mean: np.ndarray
    variance: np.ndarray
    acceptance_rate: float
    samples: np.ndarray | None = None


def pcn_reference_sampler(model, steps, beta, seed, thin=0, burn_frac=0.2):
    """Preconditioned Crank-Nicolson chain targeting the posterior.

    Proposes x' = mean + sqrt(1 - beta^2) (x - mean) + beta L z and accepts
    with probability min(1, exp(potential(x) - potential(x'))); the prior
    factor in the acceptance ratio cancels exactly.  Returns moment
    estimates after discarding the first ``burn_frac`` of the chain; with
    thin > 0 every thin-th retained state is also returned.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    if steps < 1000:
        raise ValueError("use at least 1000 steps")
    prior = model.prior
    rng = np.random.default_rng((seed, _CHAIN_STREAM))
    x = prior.mean + prior.chol @ np.random.default_rng(
        (seed, _INIT_STREAM)).standard_normal(prior.dim)
    eta = model.likelihood_potential(x)

    contraction = np.sqrt(1.0 - beta**2)
    burn = int(burn_frac * steps)
    acc = 0
    kept = 0
    total = np.zeros(prior.dim)
    total_sq = np.zeros(prior.dim)
    samples = []
    for step in range(steps):
        z = rng.standard_normal(prior.dim)
        proposal = prior.mean + contraction * (x - prior.mean) \
            + beta * (prior.chol @ z)
        eta_prop = model.likelihood_potential(proposal)
        if np.log(rng.uniform()) < eta - eta_prop:
            x = proposal
            eta = eta_prop
            acc += 1
        if step >= burn:
            kept += 1
            total += x
            total_sq += x * x
            if thin > 0 and (step - burn) % thin == 0:
                samples.append(x.copy())
    mean = total / kept
    variance = total_sq / kept - mean**2
    return PcnResult(
        mean=mean, variance=np.maximum(variance, 0.0),
        acceptance_rate=acc / steps,
        samples=np.array(samples) if thin > 0 else None,
    )
