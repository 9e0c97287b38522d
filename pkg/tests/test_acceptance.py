"""Acceptance suite: one test per criterion, each printing a verdict line.

Tolerances are pinned here, not calibrated elsewhere.  Heavy artifacts
(reference chains, repeated-trial runs) are shared through module-scoped
fixtures so the suite stays inside its runtime budgets.
"""

import time

import numpy as np
import pytest
import scipy.linalg

from pstein.benchmarks import (analytic_posterior, assemble_linear_problem,
                               assemble_lognormal_problem,
                               pcn_reference_sampler,
                               projected_analytic_posterior)
from pstein.diagnostics import (gaussian_kl, gelman_rubin, moment_rmse,
                                weighted_norm)
from pstein.linalg import randomized_generalized_eig, SymmetricOperator
from pstein.model import sample_prior
from pstein.parallel import Partition, parallel_psvn
from pstein.subspace import build_basis, gradient_and_curvature
from pstein.transport import TransportConfig, adaptive_run, run


def _verdict(num, ok, detail):
    print(f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def _trial_ensembles(model, method, particles, trials, iterations,
                     base_seed=300, **cfg_kwargs):
    finals = []
    cfg = TransportConfig(method=method, particles=particles,
                          max_iterations=iterations, tol_update=1e-12,
                          tol_gradient=1e-12, **cfg_kwargs)
    for t in range(trials):
        finals.append(run(model, cfg, seed=base_seed + t).ensemble)
    return finals


@pytest.fixture(scope="module")
def dimension_sweep_errors():
    """pSVN and SVN variance RMSE at d = 17 and d = 1025 (criterion 3)."""
    out = {}
    for n in (4, 10):
        problem = assemble_linear_problem(n)
        model = problem.posterior_model()
        post = analytic_posterior(problem)
        mass = problem.mass_matrix
        for method in ("psvn", "svn"):
            finals = _trial_ensembles(model, method, particles=128,
                                      trials=10, iterations=10)
            err = moment_rmse(finals, post.mean, post.pointwise_variance,
                              mass)
            out[(method, problem.d)] = err
    return out


@pytest.fixture(scope="module")
def nonlinear_reference():
    """Four-chain pCN reference for the lognormal problem (criterion 9)."""
    problem = assemble_lognormal_problem(65, s=15, noise_pct=0.1)
    model = problem.posterior_model()
    chains = [pcn_reference_sampler(model, steps=300_000, beta=0.2,
                                    seed=s, thin=30)
              for s in (1, 2, 3, 4)]
    rhat = gelman_rubin([c.samples for c in chains])
    mean = np.mean([c.mean for c in chains], axis=0)
    var = np.mean([c.variance for c in chains], axis=0)
    return problem, model, rhat, mean, var


class TestCriterion01LinearOracleExactness:
    def test_map_stationarity_and_covariance_formula(self):
        start = time.perf_counter()
        worst_grad = 0.0
        worst_cov = 0.0
        for n in (4, 6, 8):
            problem = assemble_linear_problem(n)
            model = problem.posterior_model()
            post = analytic_posterior(problem)
            worst_grad = max(worst_grad, np.linalg.norm(
                model.grad_log_posterior(post.mean)))
            # independent oracle: covariance-form (Kalman) update
            A, prior_cov = problem.forward_matrix, problem.prior.cov
            innov = A @ prior_cov @ A.T + np.diag(problem.noise.diag)
            gain = prior_cov @ A.T @ np.linalg.inv(innov)
            cov_oracle = prior_cov - gain @ A @ prior_cov
            worst_cov = max(worst_cov,
                            np.linalg.norm(post.cov - cov_oracle)
                            / np.linalg.norm(cov_oracle))
        elapsed = time.perf_counter() - start
        ok = worst_grad < 1e-8 and worst_cov < 1e-10 and elapsed < 10.0
        assert _verdict(1, ok,
                        f"max |grad(MAP)| {worst_grad:.2e} (<1e-8), "
                        f"cov rel Frobenius {worst_cov:.2e} (<1e-10), "
                        f"{elapsed:.1f}s (<10s)")


class TestCriterion02SubspaceDimension:
    def test_retained_rank_constant_across_dimension(self):
        start = time.perf_counter()
        ranks = {}
        for n in (4, 6, 8, 10):
            problem = assemble_linear_problem(n)
            model = problem.posterior_model()
            ensemble = sample_prior(model.prior, 4, seed=3)
            basis = build_basis(model, ensemble, eps_lambda=0.01,
                                max_rank=min(15, problem.d), seed=0)
            ranks[problem.d] = basis.rank
        elapsed = time.perf_counter() - start
        values = list(ranks.values())
        ok = all(4 <= r <= 8 for r in values) \
            and len(set(values)) == 1 and elapsed < 60.0
        assert _verdict(2, ok, f"ranks {ranks}, {elapsed:.1f}s (<60s)")


class TestCriterion03DimensionIndependence:
    def test_variance_error_ratio(self, dimension_sweep_errors):
        errs = dimension_sweep_errors
        psvn_ratio = errs[("psvn", 1025)].variance_rmse \
            / errs[("psvn", 17)].variance_rmse
        svn_ratio = errs[("svn", 1025)].variance_rmse \
            / errs[("svn", 17)].variance_rmse
        ok = psvn_ratio <= 2.0 and svn_ratio > psvn_ratio
        assert _verdict(3, ok,
                        f"pSVN ratio {psvn_ratio:.2f} (<=2), "
                        f"SVN ratio {svn_ratio:.2f} (> pSVN ratio)")


class TestCriterion04ConvergenceOrdering:
    def test_variance_error_ordering_at_matched_iterations(self):
        problem = assemble_linear_problem(8)
        model = problem.posterior_model()
        post = analytic_posterior(problem)
        mass = problem.mass_matrix
        errs = {}
        for method in ("psvn", "svn", "svgd"):
            finals = _trial_ensembles(model, method, particles=512,
                                      trials=3, iterations=10)
            errs[method] = moment_rmse(finals, post.mean,
                                       post.pointwise_variance, mass)
        ok = errs["psvn"].variance_rmse < errs["svn"].variance_rmse \
            < errs["svgd"].variance_rmse
        assert _verdict(4, ok,
                        "variance RMSE psvn {:.3f} < svn {:.3f} < svgd {:.3f}"
                        .format(errs["psvn"].variance_rmse,
                                errs["svn"].variance_rmse,
                                errs["svgd"].variance_rmse))


class TestCriterion05NewtonExactness:
    def test_single_particle_single_step(self):
        start = time.perf_counter()
        problem = assemble_linear_problem(6)
        model = problem.posterior_model()
        cfg = TransportConfig(method="psvn", particles=1, max_iterations=1,
                              tol_update=1e-14, tol_gradient=1e-14)
        result = run(model, cfg, seed=2)
        grad, _ = gradient_and_curvature(model, result.basis,
                                         result.coefficients[0])
        gnorm = np.linalg.norm(grad)
        elapsed = time.perf_counter() - start
        ok = gnorm < 1e-8 and result.records[0].step == 1.0 \
            and elapsed < 1.0
        assert _verdict(5, ok,
                        f"|reduced grad| {gnorm:.2e} (<1e-8) after one "
                        f"unit step, {elapsed:.2f}s (<1s)")


class TestCriterion06DerivativeCorrectness:
    def test_finite_difference_suites(self):
        rng = np.random.default_rng(6)
        problems = [assemble_linear_problem(6),
                    assemble_lognormal_problem(65, s=15, noise_pct=0.01)]
        worst_grad = 0.0
        for problem in problems:
            model = problem.posterior_model()
            d = model.dim
            for _ in range(20):
                x = model.prior.mean + 0.5 * (
                    problem.prior.chol @ rng.standard_normal(d))
                v = rng.standard_normal(d)
                v /= np.linalg.norm(v)
                h = 1e-6
                fd = (model.log_unnormalized_posterior(x + h * v)
                      - model.log_unnormalized_posterior(x - h * v)) / (2 * h)
                g = model.grad_log_posterior(x)
                worst_grad = max(worst_grad,
                                 abs(fd - g @ v) / max(abs(fd), 1e-8))

        # Gauss-Newton action vs differenced gradients, near the mode
        worst_gn = 0.0
        for problem in problems:
            model = problem.posterior_model()
            d = model.dim
            x = model.prior.mean.copy()
            for _ in range(40):
                jac = model.jacobian_matrix(x)
                curv = jac.T @ model.noise.precision_apply(jac) \
                    + np.linalg.inv(problem.prior.cov)
                step = np.linalg.solve(curv, model.grad_log_posterior(x))
                x = x + step
                if np.linalg.norm(step) < 1e-11:
                    break
            for _ in range(20):
                point = x + 0.01 * (problem.prior.chol
                                    @ rng.standard_normal(d))
                v = rng.standard_normal(d)
                v /= np.linalg.norm(v)
                h = 1e-6
                fd = -(model.grad_log_posterior(point + h * v)
                       - model.grad_log_posterior(point - h * v)) / (2 * h)
                gn = model.gauss_newton_hessian_action(point, v)
                worst_gn = max(worst_gn,
                               np.linalg.norm(gn - fd) / np.linalg.norm(fd))
        ok = worst_grad < 1e-4 and worst_gn < 1e-3
        assert _verdict(6, ok,
                        f"gradient FD rel {worst_grad:.2e} (<1e-4), "
                        f"GN action rel {worst_gn:.2e} (<1e-3)")


class TestCriterion07EigensolverOracle:
    def test_randomized_matches_dense(self):
        worst = 0.0
        # benchmark operators
        for n in (6, 8):
            problem = assemble_linear_problem(n)
            A = problem.forward_matrix
            h = A.T @ (A / problem.noise.diag[:, None])
            pairs = randomized_generalized_eig(
                SymmetricOperator(dim=problem.d, action=lambda v, h=h: h @ v),
                problem.prior.chol, target_rank=10, seed=1)
            dense = scipy.linalg.eigh(h, problem.prior_precision,
                                      eigvals_only=True)[::-1][:10]
            worst = max(worst, np.max(np.abs(pairs.values - dense)
                                      / np.abs(dense)))
        # synthetic dense pencil at d = 512
        rng = np.random.default_rng(7)
        d = 512
        b = rng.standard_normal((d, 40))
        h = b @ np.diag(np.geomspace(1e3, 1e-3, 40)) @ b.T
        h = 0.5 * (h + h.T)
        a = rng.standard_normal((d, d))
        cov = a @ a.T / d + np.eye(d)
        pairs = randomized_generalized_eig(
            SymmetricOperator(dim=d, action=lambda v: h @ v),
            np.linalg.cholesky(cov), target_rank=10, seed=2)
        dense = scipy.linalg.eigh(h, np.linalg.inv(cov),
                                  eigvals_only=True)[::-1][:10]
        worst = max(worst, np.max(np.abs(pairs.values - dense)
                                  / np.abs(dense)))
        ok = worst < 1e-6
        assert _verdict(7, ok, f"top-10 eigenvalue rel err {worst:.2e} "
                               f"(<1e-6), d up to 512")


class TestCriterion08TruncationKl:
    """KL between full and rank-r projected posteriors (linear, d = 65).

    The KL remaining at rank r carries a mean term of the order of the
    discarded eigenvalue mass, so with the canonical spectrum (smooth
    ~2x decay through the 0.01 threshold, tail mass ~2e-2 past the
    covering rank) the 1e-3 bound is reached a few ranks deeper than the
    covering rank; see the decisions ledger.  The stated bound is asserted
    as written, with the deeper-truncation convergence checked alongside.
    """

    @pytest.fixture(scope="class")
    def kl_curve(self):
        problem = assemble_linear_problem(6)
        model = problem.posterior_model()
        ensemble = sample_prior(model.prior, 4, seed=9)
        basis = build_basis(model, ensemble, eps_lambda=0.0, max_rank=15,
                            seed=0)
        full = analytic_posterior(problem)
        kls = np.array([
            gaussian_kl(full,
                        projected_analytic_posterior(problem,
                                                     basis.leading(r)))
            for r in range(1, basis.rank + 1)])
        return basis, kls

    def test_kl_monotone_and_convergent(self, kl_curve):
        basis, kls = kl_curve
        monotone = bool(np.all(kls[1:] <= kls[:-1] + 1e-12))
        converges = bool(np.any(kls < 1e-3)) and kls[-1] < 1e-12
        ok = monotone and converges
        assert _verdict(8, ok,
                        f"KL monotone={monotone}, below 1e-3 from rank "
                        f"{int(np.argmax(kls < 1e-3)) + 1}, full rank "
                        f"KL {kls[-1]:.1e}")

    def test_kl_below_tolerance_at_covering_rank(self, kl_curve):
        """The stated bound at the minimal rank covering |lambda| >= 0.01."""
        basis, kls = kl_curve
        r_star = int(np.sum(np.abs(basis.eigenvalues) >= 0.01))
        ok = kls[r_star - 1] < 1e-3
        assert _verdict(8, ok,
                        f"KL at covering rank r={r_star} is "
                        f"{kls[r_star - 1]:.2e} (stated bound 1e-3; "
                        f"see ledger: tail eigenvalue mass "
                        f"{np.sum(np.abs(basis.eigenvalues[r_star:])):.2e} "
                        f"bounds it from below)")


class TestCriterion09NonlinearOracle:
    def test_reduced_newton_matches_pcn_reference(self, nonlinear_reference):
        problem, model, rhat, ref_mean, ref_var = nonlinear_reference
        assert rhat < 1.05, f"reference chains inconsistent: rhat={rhat:.3f}"
        mass = problem.mass_matrix
        cfg = TransportConfig(method="psvn", particles=512,
                              max_iterations=60, tol_update=1e-4,
                              tol_gradient=1e-4, adaptive_outer=4,
                              eps_lambda=1e-4, max_rank=30,
                              per_sample_line_search=True)
        start = time.perf_counter()
        result = adaptive_run(model, cfg, seed=42)
        elapsed = time.perf_counter() - start
        m_hat = result.ensemble.mean(axis=0)
        v_hat = result.ensemble.var(axis=0, ddof=1)
        rel_mean = weighted_norm(m_hat - ref_mean, mass) \
            / weighted_norm(ref_mean, mass)
        rel_var = weighted_norm(v_hat - ref_var, mass) \
            / weighted_norm(ref_var, mass)
        ok = rel_mean < 0.05 and rel_var < 0.15
        assert _verdict(9, ok,
                        f"rhat {rhat:.3f} (<1.05), rel mean {rel_mean:.3f} "
                        f"(<0.05), rel variance {rel_var:.3f} (<0.15), "
                        f"transport {elapsed:.0f}s")


class TestCriterion10ParallelEquivalence:
    def test_worker_invariance_and_scaling(self):
        problem = assemble_lognormal_problem(1089, s=49, noise_pct=0.1)
        model = problem.posterior_model()
        cfg = TransportConfig(method="psvn", particles=256,
                              max_iterations=6, tol_update=1e-12,
                              tol_gradient=1e-12,
                              per_sample_line_search=True)
        ensembles = {}
        wall = {}
        for workers in (1, 2, 4):
            start = time.perf_counter()
            result = parallel_psvn(model, cfg, Partition(256, workers),
                                   seed=3)
            wall[workers] = (time.perf_counter() - start) \
                / len(result.records)
            ensembles[workers] = result.ensemble
        worst = max(np.max(np.abs(ensembles[1] - ensembles[k]))
                    for k in (2, 4))
        monotone = wall[2] <= wall[1] and wall[4] <= wall[2]
        ok = worst < 1e-8 and monotone
        assert _verdict(10, ok,
                        f"max ensemble diff {worst:.2e} (<1e-8), "
                        f"sec/iter K=1:{wall[1]:.2f} K=2:{wall[2]:.2f} "
                        f"K=4:{wall[4]:.2f} (non-increasing)")


class TestCriterion11SampleCountIndependence:
    """Update-norm decay across ensemble sizes (nonlinear problem, d=1089).

    The stated form compares the largest per-particle update norm across
    N in {32, 128, 512}.  The companion test checks the ensemble-averaged
    update norm, which is the quantity whose decay the reproduction targets;
    the max statistic grows with N through its extreme-value tail during
    the transient, which is why the stated form is also recorded here
    rather than silently replaced.
    """

    @pytest.fixture(scope="class")
    def update_curves(self):
        problem = assemble_lognormal_problem(1089, s=49, noise_pct=0.1)
        model = problem.posterior_model()
        curves = {}
        for n in (32, 128, 512):
            cfg = TransportConfig(method="psvn", particles=n,
                                  max_iterations=10, tol_update=1e-12,
                                  tol_gradient=1e-12,
                                  per_sample_line_search=True)
            result = run(model, cfg, seed=5)
            curves[n] = ([rec.max_update for rec in result.records],
                         [rec.avg_update for rec in result.records])
        return curves

    def test_max_update_curves_within_factor_two(self, update_curves):
        ratios = []
        for it in range(10):
            vals = [update_curves[n][0][it] for n in (32, 128, 512)]
            ratios.append(max(vals) / min(vals))
        worst = max(ratios)
        ok = worst <= 2.0
        assert _verdict(11, ok,
                        f"worst max-update ratio across N {worst:.2f} "
                        f"(<=2); see decisions ledger for the extreme-value "
                        f"analysis of this statistic")

    def test_averaged_update_curves_within_factor_two(self, update_curves):
        """Companion property on the ensemble-averaged update norm."""
        ratios = []
        for it in range(10):
            vals = [update_curves[n][1][it] for n in (32, 128, 512)]
            ratios.append(max(vals) / min(vals))
        worst = max(ratios)
        print(f"[criterion 11c] {'PASS' if worst <= 2.0 else 'FAIL'} - "
              f"worst averaged-update ratio across N {worst:.2f} (<=2)")
        assert worst <= 2.0
