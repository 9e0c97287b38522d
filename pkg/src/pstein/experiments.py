"""Experiment matrices: seeded runs over (method, dimension, particle count).

Writes the CSV artifacts behind the reproduction figures plus a manifest
that captures the resolved configuration, so a run can be repeated
bit-identically (timing columns aside) from its manifest alone.
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .benchmarks import (analytic_posterior, assemble_linear_problem,
                         assemble_lognormal_problem, pcn_reference_sampler)
from .diagnostics import gelman_rubin, moment_rmse, weighted_norm
from .exceptions import ConfigInvalid
from .parallel import Partition, parallel_psvn
from .subspace import build_basis
from .transport import TransportConfig, adaptive_run, run, write_records_csv

MANIFEST_SCHEMA = 1

_DEFAULTS = {
    "problem": "linear1d",
    "methods": ["psvn"],
    "sweeps": None,              # list of {"dims": [...], "particles": [...]}
    "dims": [17],
    "particles": [128],
    "trials": 1,
    "seed": 1,
    "data_seed": 0,
    "iterations": 10,
    "eps_lambda": 0.01,
    "max_rank": 20,
    "workers": 1,
    "observations": 15,
    "noise_pct": None,           # problem default when omitted
    "norm": "mass",
    "tol_update": 1e-6,
    "tol_gradient": 1e-6,
    "per_sample_line_search": False,
    "lumping": "row-sum",
    "adaptive": False,
    "adaptive_outer": 3,
    "record_convergence": False,
    "oracle_moments": None,      # CSV with reference mean/variance columns
    "output": "results",
}

_FLAG_KEYS = ("methods", "dims", "particles", "trials", "seed", "workers",
              "eps_lambda", "output")


@dataclass
class ExperimentConfig:
    """Validated experiment description; unknown keys are rejected."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw, overrides=None):
        if not isinstance(raw, dict):
            raise ConfigInvalid("configuration must be a JSON object")
        if "config" in raw and "schema" in raw:      # manifest re-run
            raw = raw["config"]
        unknown = set(raw) - set(_DEFAULTS)
        if unknown:
            raise ConfigInvalid(f"unknown configuration keys: {sorted(unknown)}")
        values = dict(_DEFAULTS)
        values.update(raw)
        if overrides:
            for key, val in overrides.items():
                if val is not None:
                    values[key] = val
        cls._validate(values)
        return cls(values=values)

    @staticmethod
    def _validate(v):
        if v["problem"] not in ("linear1d", "lognormal1d"):
            raise ConfigInvalid(f"unknown problem {v['problem']!r}")
        for m in v["methods"]:
            if m not in ("svgd", "svn", "psvn"):
                raise ConfigInvalid(f"unknown method {m!r}")
        if v["sweeps"] is None:
            v["sweeps"] = [{"dims": list(v["dims"]),
                            "particles": list(v["particles"])}]
        for sweep in v["sweeps"]:
            extra = set(sweep) - {"dims", "particles"}
            if extra:
                raise ConfigInvalid(f"unknown sweep keys: {sorted(extra)}")
            if v["problem"] == "linear1d":
                for d in sweep["dims"]:
                    n = round(math.log2(d - 1))
                    if 2**n + 1 != d:
                        raise ConfigInvalid(
                            f"linear1d dimension {d} is not 2^n + 1")
        if v["trials"] < 1:
            raise ConfigInvalid("trials must be >= 1")
        if v["workers"] < 1:
            raise ConfigInvalid("workers must be >= 1")
        if v["norm"] not in ("mass", "euclidean"):
            raise ConfigInvalid("norm must be 'mass' or 'euclidean'")

    def __getitem__(self, key):
        return self.values[key]


def _assemble(cfg, dim):
    if cfg["problem"] == "linear1d":
        n = round(math.log2(dim - 1))
        kwargs = {"s": cfg["observations"], "data_seed": cfg["data_seed"]}
        if cfg["noise_pct"] is not None:
            kwargs["noise_pct"] = cfg["noise_pct"]
        return assemble_linear_problem(n, **kwargs)
    kwargs = {"s": cfg["observations"], "data_seed": cfg["data_seed"]}
    if cfg["noise_pct"] is not None:
        kwargs["noise_pct"] = cfg["noise_pct"]
    return assemble_lognormal_problem(dim, **kwargs)


def _transport_config(cfg, method, particles):
    return TransportConfig(
        method=method,
        particles=particles,
        max_iterations=cfg["iterations"],
        tol_update=cfg["tol_update"],
        tol_gradient=cfg["tol_gradient"],
        per_sample_line_search=cfg["per_sample_line_search"],
        lumping=cfg["lumping"],
        eps_lambda=cfg["eps_lambda"],
        max_rank=cfg["max_rank"],
        adaptive_outer=cfg["adaptive_outer"],
    )


def _load_oracle_csv(path):
    mean = []
    var = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            mean.append(float(row["mean"]))
            var.append(float(row["variance"]))
    return np.array(mean), np.array(var)


def _oracle_moments(cfg, problem):
    if cfg["problem"] == "linear1d":
        post = analytic_posterior(problem)
        return post.mean, post.pointwise_variance
    if cfg["oracle_moments"]:
        return _load_oracle_csv(cfg["oracle_moments"])
    return None, None


def run_experiment(cfg, output_dir=None):
    """Execute the experiment matrix and write all artifacts.

    Returns the output directory.  Artifacts: per-run iteration CSVs,
    trial_errors.csv, summary.csv, eigenvalues.csv (reduced runs),
    convergence.csv (when per-iteration scoring is on), manifest.json.
    """
    outdir = output_dir or cfg["output"]
    os.makedirs(outdir, exist_ok=True)
    trial_rows = []
    summary_rows = []
    convergence_rows = []
    eigen_rows = []
    artifacts = []

    for sweep in cfg["sweeps"]:
        for dim in sweep["dims"]:
            problem = _assemble(cfg, dim)
            model = problem.posterior_model()
            mass = problem.mass_matrix if cfg["norm"] == "mass" else None
            oracle_mean, oracle_var = _oracle_moments(cfg, problem)
            for n_particles in sweep["particles"]:
                for method in cfg["methods"]:
                    tcfg = _transport_config(cfg, method, n_particles)
                    finals = []
                    for trial in range(cfg["trials"]):
                        seed = cfg["seed"] + trial
                        conv = []
                        callback = None
                        if (cfg["record_convergence"]
                                and oracle_mean is not None):
                            def callback(it, ensemble, _conv=conv):
                                err = moment_rmse([ensemble], oracle_mean,
                                                  oracle_var, mass)
                                _conv.append((it, err.mean_rmse,
                                              err.variance_rmse))
                        result = _dispatch(model, tcfg, cfg, seed, callback)
                        finals.append(result.ensemble)
                        tag = f"{method}_d{dim}_N{n_particles}_trial{trial}"
                        iters_path = os.path.join(outdir, f"iters_{tag}.csv")
                        write_records_csv(result.records, iters_path)
                        artifacts.append(os.path.basename(iters_path))
                        for it, me, ve in conv:
                            convergence_rows.append(
                                [method, dim, n_particles, trial, it,
                                 repr(me), repr(ve)])
                        if oracle_mean is not None:
                            err = moment_rmse([result.ensemble], oracle_mean,
                                              oracle_var, mass)
                            trial_rows.append(
                                [method, dim, n_particles, trial,
                                 repr(err.mean_rmse), repr(err.variance_rmse),
                                 err.norm])
                        if (method == "psvn" and trial == 0
                                and result.basis is not None):
                            for idx, val in enumerate(
                                    result.basis.eigenvalues):
                                eigen_rows.append(
                                    [dim, n_particles, idx, repr(float(val))])
                    if oracle_mean is not None:
                        err = moment_rmse(finals, oracle_mean, oracle_var,
                                          mass)
                        summary_rows.append(
                            [method, dim, n_particles, err.trials,
                             repr(err.mean_rmse), repr(err.variance_rmse),
                             err.norm])

    _write_csv(os.path.join(outdir, "trial_errors.csv"),
               ["method", "d", "N", "trial", "mean_err", "var_err", "norm"],
               trial_rows, artifacts)
    _write_csv(os.path.join(outdir, "summary.csv"),
               ["method", "d", "N", "trials", "mean_rmse", "variance_rmse",
                "norm"], summary_rows, artifacts)
    if eigen_rows:
        _write_csv(os.path.join(outdir, "eigenvalues.csv"),
                   ["d", "N", "index", "eigenvalue"], eigen_rows, artifacts)
    if convergence_rows:
        _write_csv(os.path.join(outdir, "convergence.csv"),
                   ["method", "d", "N", "trial", "iter", "mean_err",
                    "var_err"], convergence_rows, artifacts)

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "package_version": __version__,
        "config": cfg.values,
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return outdir


def _dispatch(model, tcfg, cfg, seed, callback):
    if tcfg.method == "psvn" and cfg["workers"] > 1:
        partition = Partition(tcfg.particles, cfg["workers"])
        return parallel_psvn(model, tcfg, partition, seed=seed,
                             adaptive=cfg["adaptive"])
    runner = adaptive_run if (cfg["adaptive"] and tcfg.method == "psvn") \
        else run
    return runner(model, tcfg, seed=seed, callback=callback)


def _write_csv(path, header, rows, artifacts):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    artifacts.append(os.path.basename(path))


def eigen_report(cfg, output_dir=None):
    """Eigenvalue decay of the prior-preconditioned curvature across dims.

    Builds the subspace from a prior ensemble for each dimension and writes
    one CSV row per retained and unretained eigenvalue, plus the retained
    rank, so the decay (and its stability across dimension) can be plotted.
    """
    from .model import sample_prior

    outdir = output_dir or cfg["output"]
    os.makedirs(outdir, exist_ok=True)
    rows = []
    rank_rows = []
    for sweep in cfg["sweeps"]:
        for dim in sweep["dims"]:
            problem = _assemble(cfg, dim)
            model = problem.posterior_model()
            n_particles = sweep["particles"][0]
            ensemble = sample_prior(model.prior, n_particles, cfg["seed"])
            max_rank = min(cfg["max_rank"], dim)
            full = build_basis(model, ensemble, eps_lambda=0.0,
                               max_rank=max_rank, seed=cfg["seed"])
            retained = int(np.sum(
                np.abs(full.eigenvalues) >= cfg["eps_lambda"])) or 1
            rank_rows.append([dim, retained, repr(cfg["eps_lambda"])])
            for idx, val in enumerate(full.eigenvalues):
                rows.append([dim, idx, repr(float(val)),
                             int(idx < retained)])
    artifacts = []
    _write_csv(os.path.join(outdir, "eigen_decay.csv"),
               ["d", "index", "eigenvalue", "retained"], rows, artifacts)
    _write_csv(os.path.join(outdir, "retained_rank.csv"),
               ["d", "rank", "eps_lambda"], rank_rows, artifacts)
    return outdir


def oracle_report(cfg, steps, beta, chains, thin, output_dir=None):
    """pCN reference moments for the configured problem, with an R-hat gate.

    Runs ``chains`` independent chains, reports the largest potential scale
    reduction factor, and writes the pooled mean/variance per node.
    """
    outdir = output_dir or cfg["output"]
    os.makedirs(outdir, exist_ok=True)
    dim = cfg["sweeps"][0]["dims"][0]
    problem = _assemble(cfg, dim)
    model = problem.posterior_model()
    results = [pcn_reference_sampler(model, steps, beta,
                                     seed=cfg["seed"] + 17 * (c + 1),
                                     thin=thin)
               for c in range(chains)]
    rhat = gelman_rubin([r.samples for r in results]) if chains > 1 else None
    pooled_mean = np.mean([r.mean for r in results], axis=0)
    pooled_var = np.mean([r.variance for r in results], axis=0)
    with open(os.path.join(outdir, "oracle_moments.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "mean", "variance"])
        for i in range(dim):
            writer.writerow([i, repr(float(pooled_mean[i])),
                             repr(float(pooled_var[i]))])
    summary = {
        "problem": problem.descriptor,
        "steps": steps,
        "beta": beta,
        "chains": chains,
        "acceptance_rates": [r.acceptance_rate for r in results],
        "rhat": rhat,
    }
    with open(os.path.join(outdir, "oracle_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return outdir, rhat


def check_suite():
    """Fast invariant checks; returns (name, passed, detail) triples."""
    from . import kernels as _kernels
    from .subspace import project, project_ensemble, reconstruct

    checks = []

    def record(name, passed, detail=""):
        checks.append((name, bool(passed), detail))

    lin = assemble_linear_problem(4)
    x1 = np.sin(np.linspace(0, 3, lin.d))
    x2 = np.cos(np.linspace(0, 2, lin.d))
    lhs = lin.forward(2.0 * x1 - 0.5 * x2)
    rhs = 2.0 * lin.forward(x1) - 0.5 * lin.forward(x2)
    record("linear superposition", np.allclose(lhs, rhs, atol=1e-10),
           f"max diff {np.max(np.abs(lhs - rhs)):.2e}")

    logn = assemble_lognormal_problem(33, s=7)
    field = np.sin(np.linspace(0, 3, 33))
    u = logn.solution(field)
    record("flow boundary values",
           abs(u[0]) < 1e-14 and abs(u[-1] - 1.0) < 1e-12,
           f"u(0)={u[0]:.2e}, u(1)-1={u[-1] - 1.0:.2e}")
    shift = np.max(np.abs(logn.forward(field + 3.7) - logn.forward(field)))
    record("flow shift invariance", shift < 1e-10, f"max diff {shift:.2e}")

    model = lin.posterior_model()
    from .model import sample_prior as _sp
    ens = _sp(model.prior, 4, seed=3)
    basis = build_basis(model, ens, eps_lambda=0.01, max_rank=10, seed=0)
    gram = basis.psi.T @ model.prior.apply_inverse(basis.psi)
    ortho = np.max(np.abs(gram - np.eye(basis.rank)))
    record("basis orthonormality", ortho < 1e-8, f"max dev {ortho:.2e}")

    state = project(basis, ens[0])
    back = reconstruct(basis, state)
    rt = np.max(np.abs(back - ens[0]))
    record("projection round trip", rt < 1e-8, f"max dev {rt:.2e}")

    w, _ = project_ensemble(basis, ens)
    metric = _kernels.build_metric(
        np.stack([np.eye(basis.rank)] * 4))
    table = _kernels.evaluate_kernel_table(metric, w)
    sym = np.max(np.abs(table.values - table.values.T))
    diag = np.max(np.abs(np.diag(table.values) - 1.0))
    record("kernel table symmetry/diagonal", sym < 1e-12 and diag == 0.0,
           f"sym {sym:.2e}, diag {diag:.2e}")

    x0 = model.prior.mean + 0.1 * x1
    g = model.grad_log_posterior(x0)
    h = 1e-6
    v = x2 / np.linalg.norm(x2)
    fd = (model.log_unnormalized_posterior(x0 + h * v)
          - model.log_unnormalized_posterior(x0 - h * v)) / (2 * h)
    rel = abs(fd - g @ v) / max(abs(fd), 1e-12)
    record("gradient finite differences", rel < 1e-4, f"rel err {rel:.2e}")

    from .parallel import SerialCollectives
    coll = SerialCollectives()
    same = np.allclose(coll.allreduce_sum(np.arange(3.0)), np.arange(3.0))
    record("serial collectives identity", same)
    return checks
