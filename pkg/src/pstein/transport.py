"""Particle transport engines.

Kernelized gradient-descent and Newton updates in full space, the reduced
Newton update with frozen complement coordinates, an Armijo backtracking
line search on the sample-averaged negative log-density, and the adaptive
outer loop that rebuilds the subspace at the current samples.

All engines are written in bulk-synchronous worker form: per-particle work
touches only the worker's particle block, and cross-ensemble quantities go
through the collectives contract, so a single-worker run and a K-worker
run execute the same numerical steps.
"""

import csv
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import kernels, subspace
from .exceptions import SolveFailure
from .model import sample_prior
from .parallel import SerialCollectives

_BASIS_STREAM = 777

RECORD_COLUMNS = ("iter", "max_update", "max_grad", "step",
                  "t_variation", "t_kernel", "t_solve", "t_sample")


@dataclass
class TransportConfig:
    """Knobs for a transport run.

    ``tol_update`` stops on the largest per-particle update norm and
    ``tol_gradient`` on the largest per-particle (Stein) gradient norm;
    iteration count is capped by ``max_iterations``.
    """

    method: str = "psvn"                 # svgd | svn | psvn
    particles: int = 128
    max_iterations: int = 100
    tol_update: float = 1e-2
    tol_gradient: float = 1e-2
    step_init: float = 1.0
    backtrack_factor: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 10
    per_sample_line_search: bool = False
    lumping: str = "row-sum"             # row-sum | diagonal
    eps_lambda: float = 1e-2
    max_rank: int = 20
    adaptive_outer: int = 3
    basis_stagnation_angle: float = 1e-2
    metric_refresh: int = 1
    levenberg: float = 0.0
    metric_mode: str = "hessian"         # hessian | identity
    identity_metric_alpha: float | None = None
    eig_oversample: int = 10
    eig_power_iters: int = 2
    dense_metric_cutoff: int = kernels.FULL_METRIC_DENSE_CUTOFF

    def __post_init__(self):
        if self.method not in ("svgd", "svn", "psvn"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.lumping not in ("row-sum", "diagonal"):
            raise ValueError(f"unknown lumping mode {self.lumping!r}")
        if self.metric_mode not in ("hessian", "identity"):
            raise ValueError(f"unknown metric mode {self.metric_mode!r}")
        for name in ("tol_update", "tol_gradient", "step_init", "eps_lambda",
                     "sufficient_decrease"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.particles < 1 or self.max_iterations < 1:
            raise ValueError("particles and max_iterations must be >= 1")


@dataclass
class IterationRecord:
    """Per-iteration convergence and timing record."""

    iteration: int
    max_update: float
    avg_update: float
    max_grad: float
    step: float
    t_variation: float = 0.0
    t_kernel: float = 0.0
    t_solve: float = 0.0
    t_sample: float = 0.0
    stalled: bool = False

    def csv_row(self):
        return [self.iteration, repr(self.max_update), repr(self.max_grad),
                repr(self.step), repr(self.t_variation), repr(self.t_kernel),
                repr(self.t_solve), repr(self.t_sample)]


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for rec in records:
            writer.writerow(rec.csv_row())


@dataclass
class RunResult:
    """Final ensemble plus the iteration records of the run."""

    ensemble: np.ndarray
    records: list
    basis: object = None
    coefficients: np.ndarray = None
    stop_reason: str = ""
    comm_stats: object = None
    sweep_seconds: float = 0.0    # wall time inside update sweeps, excluding
                                  # the (replicated) basis construction


class _Phases:
    """Accumulates wall time per named phase of one iteration."""

    def __init__(self):
        self.times = {"variation": 0.0, "kernel": 0.0,
                      "solve": 0.0, "sample": 0.0}

    @contextmanager
    def phase(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.times[name] += time.perf_counter() - start


# ---------------------------------------------------------------------------
# line search


def _armijo(objective, obj0, decrement, config):
    """Backtracking Armijo search on a scalar objective.

    Starts from step_init and backtracks; accepts the first step with
    sufficient decrease against ``decrement`` (the directional-derivative
    estimate, negative for a descent direction).  If no trial satisfies the
    test, the smallest tried step with any decrease is accepted; with no
    decrease at all the step is 0 and the search reports a stall.
    """
    if not decrement < 0.0:
        return 0.0, obj0, True
    trials = []
    eps = config.step_init
    for _ in range(config.max_backtracks):
        val = objective(eps)
        if val <= obj0 + config.sufficient_decrease * eps * decrement:
            return eps, val, False
        trials.append((eps, val))
        eps *= config.backtrack_factor
    for eps, val in reversed(trials):
        if val < obj0:
            return eps, val, False
    return 0.0, obj0, True


def _armijo_per_sample(objective_vec, obj0, decrements, config):
    """Per-particle Armijo search; each particle backtracks independently."""
    n = obj0.shape[0]
    eps = np.full(n, config.step_init)
    accepted = np.zeros(n, dtype=bool)
    accepted_obj = obj0.copy()
    best_eps = np.zeros(n)
    best_obj = obj0.copy()
    active = decrements < 0.0
    trial = np.where(active, config.step_init, 0.0)
    for _ in range(config.max_backtracks):
        if not np.any(active):
            break
        vals = objective_vec(trial)
        ok = active & (vals <= obj0 + config.sufficient_decrease
                       * trial * decrements)
        eps[ok] = trial[ok]
        accepted_obj[ok] = vals[ok]
        accepted |= ok
        improved = active & ~ok & (vals < best_obj)
        best_obj[improved] = vals[improved]
        best_eps[improved] = trial[improved]
        active &= ~ok
        trial = np.where(active, trial * config.backtrack_factor, 0.0)
    fallback = ~accepted & (best_eps > 0)
    eps[~accepted] = 0.0
    eps[fallback] = best_eps[fallback]
    accepted_obj[fallback] = best_obj[fallback]
    stalled = ~accepted & ~fallback
    eps[stalled] = 0.0
    return eps, accepted_obj, stalled


def line_search(log_density_fn, ensemble, directions, config,
                stein_gradients, per_sample=None):
    """Armijo step-size selection for a proposed particle move.

    ``log_density_fn`` maps an (N, k) batch of points to their (N,) log
    densities; ``directions`` are the per-particle moves at unit step.
    The directional-derivative estimate is the summed inner product of the
    Stein gradients with the Newton coefficients (the Newton decrement),
    and the objective is the sample average of the negative log-density
    (the transform's log-determinant term is dropped).

    Returns (step, objective_value, stalled); arrays per particle in
    per-sample mode, scalars plus a mask otherwise.
    """
    ensemble = np.atleast_2d(ensemble)
    directions = np.atleast_2d(directions)
    n = ensemble.shape[0]
    if per_sample is None:
        per_sample = config.per_sample_line_search
    logd0 = np.asarray(log_density_fn(ensemble), dtype=float)
    if per_sample:
        decs = np.einsum("ni,ni->n", np.atleast_2d(stein_gradients), directions)

        def objective_vec(eps):
            return -np.asarray(
                log_density_fn(ensemble + eps[:, None] * directions))

        return _armijo_per_sample(objective_vec, -logd0, decs, config)
    decrement = float(np.sum(stein_gradients * directions))
    obj0 = -float(np.mean(logd0))

    def objective(eps):
        return -float(np.mean(log_density_fn(ensemble + eps * directions)))

    return _armijo(objective, obj0, decrement, config)


# ---------------------------------------------------------------------------
# reduced-coordinate (projected) Newton transport


def _init_particles(prior, lo, hi, seed):
    """Particles for global indices [lo, hi): partition-stable substreams."""
    out = np.empty((hi - lo, prior.dim))
    for k, i in enumerate(range(lo, hi)):
        z = np.random.default_rng((seed, i)).standard_normal(prior.dim)
        out[k] = prior.mean + prior.chol @ z
    return out


def _reduced_state(model, basis, w):
    """Log-density, gradient, and positive curvature at coefficients w."""
    x = basis.mean + basis.psi @ w
    res = model.residual(x)
    jpsi = model.jacobian_matrix(x) @ basis.psi
    grad = jpsi.T @ model.noise.precision_apply(res) - w
    curv = jpsi.T @ model.noise.precision_apply(jpsi) + np.eye(basis.rank)
    logd = -0.5 * model.noise.norm_sq(res) - 0.5 * float(w @ w)
    return logd, grad, curv


_BLOCK_CHUNK = 128


def _reduced_state_block(model, basis, w_block):
    """Batched log-densities, gradients, and curvatures for a particle block.

    Keeps the work in a few large array operations (chunked to bound the
    Jacobian-stack memory) so worker threads spend their time inside
    GIL-releasing kernels.
    """
    m, r = w_block.shape
    logd = np.empty(m)
    grad = np.empty((m, r))
    curv = np.empty((m, r, r))
    for lo in range(0, m, _BLOCK_CHUNK):
        hi = min(m, lo + _BLOCK_CHUNK)
        wc = w_block[lo:hi]
        xs = basis.mean + wc @ basis.psi.T
        res = model.data - model.forward_batch(xs)
        wres = model.noise.precision_apply_rows(res)
        jpsi = model.jacobian_action_batch(xs, basis.psi)    # (B, s, r)
        wjpsi = jpsi / model.noise.diag[None, :, None] \
            if model.noise.diag is not None else np.stack(
                [model.noise.precision_apply(j) for j in jpsi])
        grad[lo:hi] = np.einsum("bsr,bs->br", jpsi, wres) - wc
        curv[lo:hi] = np.einsum("bsr,bsq->brq", wjpsi, jpsi) + np.eye(r)
        logd[lo:hi] = -0.5 * np.einsum("bs,bs->b", res, wres) \
            - 0.5 * np.einsum("br,br->b", wc, wc)
    return logd, grad, curv


def _reduced_log_density_block(model, basis, w_block):
    out = np.empty(w_block.shape[0])
    for lo in range(0, w_block.shape[0], _BLOCK_CHUNK):
        hi = min(w_block.shape[0], lo + _BLOCK_CHUNK)
        wc = w_block[lo:hi]
        xs = basis.mean + wc @ basis.psi.T
        res = model.data - model.forward_batch(xs)
        out[lo:hi] = -0.5 * np.einsum(
            "bs,bs->b", res, model.noise.precision_apply_rows(res)) \
            - 0.5 * np.einsum("br,br->b", wc, wc)
    return out


def _solve_lumped(h_stack, rhs, config):
    """Solve the per-particle lumped Newton systems, damping on failure."""
    r = h_stack.shape[1]
    if config.levenberg > 0.0:
        traces = np.trace(h_stack, axis1=1, axis2=2)
        h_stack = h_stack + (config.levenberg / r) * traces[:, None, None] \
            * np.eye(r)
    try:
        return np.linalg.solve(h_stack, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        traces = np.trace(h_stack, axis1=1, axis2=2)
        damped = h_stack + (1e-8 / r) * traces[:, None, None] * np.eye(r)
        try:
            return np.linalg.solve(damped, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SolveFailure("lumped Newton system singular "
                               "even after damping") from exc


def _psvn_sweep(model, basis, w_loc, xperp_loc, config, coll, n_total,
                callback=None, iter_offset=0, xperp_global=None):
    """One pass of reduced Newton updates until a stopping criterion fires."""
    records = []
    stop_reason = "max_iterations"
    r = basis.rank
    w_all = coll.allgather(w_loc)
    metric = None
    c_all = np.zeros((n_total, r))
    for it in range(config.max_iterations):
        phases = _Phases()
        with phases.phase("variation"):
            m_loc = w_loc.shape[0]
            logd_loc, glp_loc, curv_loc = _reduced_state_block(
                model, basis, w_loc)
        glp_all = coll.allgather(glp_loc)
        curv_all = coll.allgather(curv_loc)

        with phases.phase("kernel"):
            if metric is None or it % config.metric_refresh == 0:
                metric = kernels.build_metric(curv_all)
            vals_loc, grads_loc = kernels.evaluate_kernel_rows(
                metric, w_loc, w_all)
            part_s = vals_loc.sum(axis=0)
            part_vg = -grads_loc.sum(axis=0)
        s_all = coll.allreduce_sum(part_s)
        vg_all = coll.allreduce_sum(part_vg)

        with phases.phase("solve"):
            g_loc = (-vals_loc @ glp_all + grads_loc.sum(axis=1)) / n_total
            if config.lumping == "row-sum":
                h_loc = np.einsum("ap,pij->aij", vals_loc * s_all, curv_all)
                h_loc -= np.einsum("pi,apj->aij", vg_all, grads_loc)
            else:
                h_loc = np.einsum("ap,pij->aij", vals_loc**2, curv_all)
                h_loc += np.einsum("apk,apl->akl", grads_loc, grads_loc)
            h_loc /= n_total
            c_loc = _solve_lumped(h_loc, -g_loc, config)
        c_all = coll.allgather(c_loc)

        with phases.phase("variation"):
            q_loc = vals_loc @ c_all
            if config.per_sample_line_search:
                decs = np.einsum("ai,ai->a", g_loc, c_loc)

                def objective_vec(eps):
                    return -_reduced_log_density_block(
                        model, basis, w_loc + eps[:, None] * q_loc)

                eps_loc, _, stall_loc = _armijo_per_sample(
                    objective_vec, -logd_loc, decs, config)
                step = eps_loc[:, None]
                mean_step = float(coll.allreduce_sum(
                    np.array(eps_loc.sum())) / n_total)
                stalled = bool(np.all(coll.allgather(
                    np.array([stall_loc.all()], dtype=bool))))
            else:
                dec = float(coll.allreduce_sum(
                    np.array(np.sum(g_loc * c_loc))))
                obj0 = float(coll.allreduce_sum(
                    np.array(-logd_loc.sum()))) / n_total

                def objective(eps):
                    local = -_reduced_log_density_block(
                        model, basis, w_loc + eps * q_loc).sum()
                    return float(coll.allreduce_sum(np.array(local))) / n_total

                eps, _, stalled = _armijo(objective, obj0, dec, config)
                step = eps
                mean_step = eps

        with phases.phase("sample"):
            dw_loc = step * q_loc
            w_loc = w_loc + dw_loc
            w_all = coll.allgather(w_loc)
            upd_norms = np.linalg.norm(dw_loc, axis=1)
            grad_norms = np.linalg.norm(g_loc, axis=1)
            local_stats = np.array([
                upd_norms.max() if m_loc else 0.0,
                grad_norms.max() if m_loc else 0.0])
            stats = coll.allgather(local_stats[None, :])
            max_update = float(stats[:, 0].max())
            max_grad = float(stats[:, 1].max())
            avg_update = float(coll.allreduce_sum(
                np.array(upd_norms.sum())) / n_total)

        records.append(IterationRecord(
            iteration=iter_offset + it, max_update=max_update,
            avg_update=avg_update, max_grad=max_grad, step=mean_step,
            stalled=bool(stalled), **{f"t_{k}": v
                                      for k, v in phases.times.items()}))
        if callback is not None and coll.rank == 0:
            full = subspace.reconstruct_ensemble(
                basis, w_all, xperp_global)
            callback(iter_offset + it, full)
        if max_update < config.tol_update:
            stop_reason = "update"
            break
        if max_grad < config.tol_gradient:
            stop_reason = "gradient"
            break
    return w_loc, w_all, records, stop_reason


def _basis_stagnant(old, new, angle_tol):
    """True when successive bases span nearly the same subspace.

    The largest principal angle is measured in the prior-precision inner
    product, where both bases are orthonormal.
    """
    if old is None or old.rank != new.rank:
        return False
    overlap = old.psi_prec.T @ new.psi
    cosines = np.linalg.svd(overlap, compute_uv=False)
    smallest = np.clip(cosines.min(), -1.0, 1.0)
    return float(np.arccos(smallest)) < angle_tol


def _run_projected(model, config, seed, coll, lo, hi, outer_iters, callback):
    x_loc = _init_particles(model.prior, lo, hi, seed)
    n_total = config.particles
    records = []
    basis = None
    stop_reason = ""
    w_loc = xperp_loc = w_all = None
    offset = 0
    sweep_seconds = 0.0
    for outer in range(outer_iters):
        x_all = coll.allgather(x_loc)
        new_basis = subspace.build_basis(
            model, x_all, config.eps_lambda, config.max_rank,
            seed=(seed, _BASIS_STREAM, outer),
            oversample=config.eig_oversample,
            power_iters=config.eig_power_iters)
        if outer > 0 and _basis_stagnant(basis, new_basis,
                                         config.basis_stagnation_angle):
            stop_reason += "+basis_stagnant"
            break
        basis = new_basis
        w_loc, xperp_loc = subspace.project_ensemble(basis, x_loc)
        xperp_all = coll.allgather(xperp_loc) if callback is not None else None
        coll.barrier()
        sweep_start = time.perf_counter()
        w_loc, w_all, sweep_records, reason = _psvn_sweep(
            model, basis, w_loc, xperp_loc, config, coll, n_total,
            callback=callback, iter_offset=offset, xperp_global=xperp_all)
        sweep_seconds += time.perf_counter() - sweep_start
        records.extend(sweep_records)
        offset += len(sweep_records)
        x_loc = subspace.reconstruct_ensemble(basis, w_loc, xperp_loc)
        stop_reason = reason
    ensemble = coll.allgather(x_loc)
    return RunResult(ensemble=ensemble, records=records, basis=basis,
                     coefficients=w_all, stop_reason=stop_reason,
                     comm_stats=coll.stats, sweep_seconds=sweep_seconds)


# ---------------------------------------------------------------------------
# full-space engines (gradient-descent and Newton baselines)


def _full_space_state(model, ensemble):
    """Log-densities and log-density gradients for the whole ensemble."""
    n = ensemble.shape[0]
    prior = model.prior
    centered = ensemble - prior.mean
    prec_centered = prior.apply_inverse(centered.T).T
    logd = np.empty(n)
    glp = np.empty_like(ensemble)
    for m, x in enumerate(ensemble):
        res = model.residual(x)
        jac = model.jacobian_matrix(x)
        glp[m] = jac.T @ model.noise.precision_apply(res) - prec_centered[m]
        logd[m] = -0.5 * model.noise.norm_sq(res) \
            - 0.5 * float(centered[m] @ prec_centered[m])
    return logd, glp


def _log_density_batch(model, ensemble):
    out = np.empty(ensemble.shape[0])
    for m, x in enumerate(ensemble):
        out[m] = model.log_unnormalized_posterior(x)
    return out


def _dense_curvature(model, x, prior_precision):
    jac = model.jacobian_matrix(x)
    return jac.T @ model.noise.precision_apply(jac) + prior_precision


def _svgd_directions(values, y_metric, glp, n):
    ksum = values.sum(axis=1)
    g = (-values @ glp + values @ y_metric - ksum[:, None] * y_metric) / n
    return g


def _solve_full_newton_dense(model, ensemble, values, y_metric, g_stein,
                             config, prior_precision, h_const):
    """Assemble and solve the lumped full-space Newton systems densely."""
    n, d = ensemble.shape
    ksum = values.sum(axis=1)
    ky = values @ y_metric
    v_all = ky - ksum[:, None] * y_metric          # sum over centers of grad_1 k
    curv_stack = None
    if h_const is None:
        curv_stack = np.stack([_dense_curvature(model, x, prior_precision)
                               for x in ensemble])
    c = np.empty_like(ensemble)
    chunk = max(1, int(2.0e8 / (d * d)))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        h_stack = np.empty((stop - start, d, d))
        for m in range(start, stop):
            u_m = -(y_metric - y_metric[m]) * values[:, m][:, None]
            if config.lumping == "row-sum":
                if h_const is not None:
                    h_m = float(values[:, m] @ ksum) * h_const
                else:
                    h_m = np.einsum("p,pij->ij", values[:, m] * ksum,
                                    curv_stack)
                h_m = h_m + v_all.T @ u_m
            else:
                if h_const is not None:
                    h_m = float(values[:, m] @ values[:, m]) * h_const
                else:
                    h_m = np.einsum("p,pij->ij", values[:, m]**2, curv_stack)
                h_m = h_m + u_m.T @ u_m
            h_stack[m - start] = h_m / n
        if config.levenberg > 0.0:
            traces = np.trace(h_stack, axis1=1, axis2=2)
            h_stack += (config.levenberg / d) * traces[:, None, None] * np.eye(d)
        try:
            c[start:stop] = np.linalg.solve(
                h_stack, -g_stein[start:stop, :, None])[..., 0]
        except np.linalg.LinAlgError:
            traces = np.trace(h_stack, axis1=1, axis2=2)
            h_stack += (1e-8 / d) * traces[:, None, None] * np.eye(d)
            try:
                c[start:stop] = np.linalg.solve(
                    h_stack, -g_stein[start:stop, :, None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SolveFailure("lumped Newton system singular "
                                   "even after damping") from exc
    return c


def _solve_full_newton_woodbury(values, y_metric, g_stein, h_cho, n):
    """Low-rank solve of the row-sum lumped systems for constant curvature.

    H_m = a_m/n * H + (1/n) V^T U_m with V, U_m built from kernel gradients;
    each system is inverted through the factored H plus an (N, N) correction.
    Falls back by raising LinAlgError for the caller to redo densely.
    """
    ksum = values.sum(axis=1)
    ky = values @ y_metric
    v_all = ky - ksum[:, None] * y_metric
    z = scipy.linalg.cho_solve(h_cho, v_all.T)            # H^{-1} V^T, (d, N)
    hg = scipy.linalg.cho_solve(h_cho, g_stein.T).T       # H^{-1} g, (N, d)
    c = np.empty_like(g_stein)
    n_particles = values.shape[0]
    eye = np.eye(n_particles)
    for m in range(n_particles):
        alpha = float(values[:, m] @ ksum) / n
        u_m = -(y_metric - y_metric[m]) * values[:, m][:, None]
        t1 = hg[m] / alpha
        t2 = u_m @ t1 / n
        s_mat = eye + (u_m @ z) / (alpha * n)
        t3 = np.linalg.solve(s_mat, t2)
        c[m] = -(t1 - (z @ t3) / alpha)
    return c


def _run_full_space(model, config, seed, callback):
    n = config.particles
    ensemble = sample_prior(model.prior, n, seed)
    d = ensemble.shape[1]
    records = []
    stop_reason = "max_iterations"
    metric = None
    prior_precision = None
    h_const = h_cho = None
    if config.method == "svn" or config.metric_mode == "hessian":
        prior_precision = model.prior.apply_inverse(np.eye(d))
        prior_precision = 0.5 * (prior_precision + prior_precision.T)
    if config.method == "svn" and model.hessian_is_constant:
        h_const = _dense_curvature(model, ensemble[0], prior_precision)
        try:
            h_cho = scipy.linalg.cho_factor(h_const)
        except scipy.linalg.LinAlgError:
            h_cho = None

    for it in range(config.max_iterations):
        phases = _Phases()
        with phases.phase("variation"):
            logd, glp = _full_space_state(model, ensemble)
        with phases.phase("kernel"):
            if metric is None or it % config.metric_refresh == 0:
                if config.metric_mode == "identity":
                    metric = kernels.identity_metric(
                        d, config.identity_metric_alpha)
                else:
                    metric = kernels.build_full_metric(
                        model, ensemble, config.dense_metric_cutoff)
            values, y_metric, _ = kernels.kernel_values(metric, ensemble)
            g_stein = _svgd_directions(values, y_metric, glp, n)

        with phases.phase("solve"):
            if config.method == "svgd":
                coeffs = -g_stein
                directions = coeffs
            else:
                use_woodbury = (h_cho is not None
                                and config.lumping == "row-sum"
                                and config.levenberg == 0.0
                                and n <= d // 2)
                if use_woodbury:
                    try:
                        coeffs = _solve_full_newton_woodbury(
                            values, y_metric, g_stein, h_cho, n)
                    except np.linalg.LinAlgError:
                        coeffs = _solve_full_newton_dense(
                            model, ensemble, values, y_metric, g_stein,
                            config, prior_precision, h_const)
                else:
                    coeffs = _solve_full_newton_dense(
                        model, ensemble, values, y_metric, g_stein,
                        config, prior_precision, h_const)
                directions = values @ coeffs

        with phases.phase("variation"):
            if config.per_sample_line_search:
                decs = np.einsum("ni,ni->n", g_stein, coeffs)

                def objective_vec(eps):
                    return -_log_density_batch(
                        model, ensemble + eps[:, None] * directions)

                eps_vec, _, stall_mask = _armijo_per_sample(
                    objective_vec, -logd, decs, config)
                step = eps_vec[:, None]
                mean_step = float(eps_vec.mean())
                stalled = bool(stall_mask.all())
            else:
                dec = float(np.sum(g_stein * coeffs))
                obj0 = -float(logd.mean())

                def objective(eps):
                    return -float(_log_density_batch(
                        model, ensemble + eps * directions).mean())

                eps, _, stalled = _armijo(objective, obj0, dec, config)
                step = eps
                mean_step = eps

        with phases.phase("sample"):
            delta = step * directions
            ensemble = ensemble + delta
            upd = np.linalg.norm(delta, axis=1)
            grad_norms = np.linalg.norm(g_stein, axis=1)

        records.append(IterationRecord(
            iteration=it, max_update=float(upd.max()),
            avg_update=float(upd.mean()), max_grad=float(grad_norms.max()),
            step=mean_step, stalled=bool(stalled),
            **{f"t_{k}": v for k, v in phases.times.items()}))
        if callback is not None:
            callback(it, ensemble)
        if upd.max() < config.tol_update:
            stop_reason = "update"
            break
        if grad_norms.max() < config.tol_gradient:
            stop_reason = "gradient"
            break
    return RunResult(ensemble=ensemble, records=records,
                     stop_reason=stop_reason)


# ---------------------------------------------------------------------------
# public drivers


def run(model, config, seed=0, collectives=None, *, particle_range=None,
        callback=None):
    """Run the configured transport from prior samples to the posterior.

    For the projected method the subspace is built once from the initial
    ensemble; ``adaptive_run`` rebuilds it between sweeps.  ``collectives``
    and ``particle_range`` put the projected method in worker mode; the
    full-space baselines run serially.
    """
    coll = collectives or SerialCollectives()
    if config.method == "psvn":
        lo, hi = particle_range or (0, config.particles)
        return _run_projected(model, config, seed, coll, lo, hi,
                              outer_iters=1, callback=callback)
    if coll.size != 1:
        raise ValueError("full-space baselines run on a single worker")
    return _run_full_space(model, config, seed, callback)


def adaptive_run(model, config, seed=0, collectives=None, *,
                 particle_range=None, callback=None):
    """Outer loop that rebuilds the subspace at the current samples.

    Runs ``config.adaptive_outer`` build-and-sweep rounds, stopping early
    when successive bases stagnate (largest principal angle below
    ``config.basis_stagnation_angle``).  With one outer round this is
    exactly ``run``.
    """
    if config.method != "psvn":
        raise ValueError("the adaptive outer loop applies to psvn only")
    coll = collectives or SerialCollectives()
    lo, hi = particle_range or (0, config.particles)
    return _run_projected(model, config, seed, coll, lo, hi,
                          outer_iters=config.adaptive_outer,
                          callback=callback)
