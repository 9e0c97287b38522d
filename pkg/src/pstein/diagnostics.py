"""Statistical scoring of sample ensembles against oracle posteriors."""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import DimensionMismatch, SingularCovariance


@dataclass(frozen=True)
class MomentErrors:
    """Trial-averaged moment errors in the chosen norm."""

    mean_rmse: float
    variance_rmse: float
    trials: int
    norm: str


def weighted_norm(v, mass_matrix=None):
    """||v||_X with X a mass matrix (or the identity when omitted)."""
    v = np.asarray(v, dtype=float)
    if mass_matrix is None:
        return float(np.linalg.norm(v))
    return float(np.sqrt(v @ (mass_matrix @ v)))


def moment_rmse(ensembles, oracle_mean, oracle_variance, mass_matrix=None):
    """RMSE of sample mean and pointwise variance over repeated trials.

    mean_rmse = sqrt(mean_t ||mean(ensemble_t) - oracle_mean||_X^2) and the
    variance error is computed the same way from the pointwise (diagonal)
    sample variances.  The norm is the mass-weighted L2 norm when a mass
    matrix is supplied, Euclidean otherwise.
    """
    oracle_mean = np.asarray(oracle_mean, dtype=float)
    oracle_variance = np.asarray(oracle_variance, dtype=float)
    if len(ensembles) < 1:
        raise DimensionMismatch("need at least one trial ensemble")
    mean_sq = 0.0
    var_sq = 0.0
    for ens in ensembles:
        ens = np.atleast_2d(ens)
        if ens.shape[1] != oracle_mean.shape[0]:
            raise DimensionMismatch("ensemble dimension mismatch")
        m_hat = ens.mean(axis=0)
        ddof = 1 if ens.shape[0] > 1 else 0
        v_hat = ens.var(axis=0, ddof=ddof)
        mean_sq += weighted_norm(m_hat - oracle_mean, mass_matrix) ** 2
        var_sq += weighted_norm(v_hat - oracle_variance, mass_matrix) ** 2
    t = len(ensembles)
    return MomentErrors(
        mean_rmse=float(np.sqrt(mean_sq / t)),
        variance_rmse=float(np.sqrt(var_sq / t)),
        trials=t,
        norm="euclidean" if mass_matrix is None else "mass-weighted",
    )


def gaussian_kl(p, q):
    """KL divergence KL(p || q) between two Gaussians on R^d.

    0.5 * [tr(Sq^{-1} Sp) + (mq - mp)^T Sq^{-1} (mq - mp) - d
           + logdet Sq - logdet Sp]
    """
    mp, sp = np.asarray(p.mean, dtype=float), np.asarray(p.cov, dtype=float)
    mq, sq = np.asarray(q.mean, dtype=float), np.asarray(q.cov, dtype=float)
    if mp.shape != mq.shape or sp.shape != sq.shape:
        raise DimensionMismatch("Gaussians live on different spaces")
    d = mp.shape[0]
    try:
        cq = scipy.linalg.cho_factor(sq)
        cp = scipy.linalg.cho_factor(sp)
    except scipy.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    trace = float(np.trace(scipy.linalg.cho_solve(cq, sp)))
    diff = mq - mp
    maha = float(diff @ scipy.linalg.cho_solve(cq, diff))
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(cq[0]))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(cp[0]))))
    return max(0.0, 0.5 * (trace + maha - d + logdet_q - logdet_p))


def gelman_rubin(chains):
    """Largest per-coordinate potential scale reduction factor.

    ``chains`` is a sequence of (n, d) sample arrays from independent
    chains.  Classic between/within-variance form; values near 1 indicate
    the chains agree.
    """
    stacks = [np.atleast_2d(c) for c in chains]
    m = len(stacks)
    if m < 2:
        raise DimensionMismatch("need at least two chains")
    n = min(s.shape[0] for s in stacks)
    stacks = np.stack([s[:n] for s in stacks])        # (m, n, d)
    chain_means = stacks.mean(axis=1)
    chain_vars = stacks.var(axis=1, ddof=1)
    w = chain_vars.mean(axis=0)
    b = n * chain_means.var(axis=0, ddof=1)
    v_hat = (n - 1) / n * w + b / n
    rhat = np.sqrt(v_hat / np.maximum(w, 1e-300))
    return float(rhat.max())
