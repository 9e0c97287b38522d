"""Projected Stein variational Newton for high-dimensional Bayesian inference.

Particle transport samplers (kernelized gradient descent, Newton, and the
subspace-projected Newton variant), benchmark inverse problems with exact
or chain-verified posteriors, and the diagnostics used to score them.
"""

__version__ = "0.1.0"

from .benchmarks import (AnalyticGaussianPosterior, LinearPdeProblem,
                         LognormalFlowProblem, analytic_posterior,
                         assemble_linear_problem, assemble_lognormal_problem,
                         pcn_reference_sampler, projected_analytic_posterior)
from .diagnostics import MomentErrors, gaussian_kl, gelman_rubin, moment_rmse
from .kernels import (KernelMetric, KernelTable, build_full_metric,
                      build_metric, evaluate_kernel_table)
from .linalg import (EigenPairs, SymmetricOperator, cholesky_factor,
                     randomized_generalized_eig, solve_tridiagonal,
                     truncate_by_tolerance)
from .model import (GaussianNoise, GaussianPrior, PosteriorModel,
                    sample_prior, zero_forward_model)
from .parallel import Partition, SerialCollectives, ThreadCollectives, \
    parallel_psvn
from .subspace import (ProjectedState, SubspaceBasis, build_basis, project,
                       project_ensemble, projected_gradient,
                       projected_hessian, projected_log_density, reconstruct,
                       reconstruct_ensemble)
from .transport import (IterationRecord, RunResult, TransportConfig,
                        adaptive_run, line_search, run, write_records_csv)
