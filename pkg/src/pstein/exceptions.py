"""Exception types shared across the package."""


class NotPositiveDefinite(Exception):
    """A matrix required to be s.p.d. failed its factorization."""


class RankExceedsDimension(ValueError):
    """Requested sketch size (rank + oversampling) exceeds the operator dimension."""


class BreakdownInQR(RuntimeError):
    """The randomized sketch lost rank and could not be recovered by a retry."""


class SingularSystem(Exception):
    """A linear system that must be solvable was numerically singular."""


class SingularCovariance(Exception):
    """A covariance matrix required to be s.p.d. was numerically singular."""


class ForwardSolveFailure(Exception):
    """The forward map produced non-finite output."""


class SolveFailure(Exception):
    """A per-particle Newton system could not be solved, even after damping."""


class DimensionMismatch(ValueError):
    """Array arguments have inconsistent shapes."""


class ShapeMismatch(ValueError):
    """Collective communication received blocks of inconsistent shape."""


class ConfigInvalid(ValueError):
    """An experiment configuration failed validation."""
