"""Exception types raised across the package.

Every error condition named in an operation contract maps to one class here
so callers can discriminate failure modes without parsing messages.
"""


class FpcoxError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FpcoxError, ValueError):
    """An argument violates an operation precondition."""


class OutOfDomainError(InvalidArgumentError):
    """Evaluation point lies outside the basis domain."""


class DataValidationError(FpcoxError, ValueError):
    """Input data violate a structural invariant (ingest/join problems)."""


class KnotPlacementError(FpcoxError):
    """Too few distinct pooled event times to place hazard knots."""


class NonFiniteHazardError(FpcoxError):
    """exp overflow while integrating the baseline hazard."""


class ZeroProbabilityIntervalError(FpcoxError):
    """Interval-censored record whose interval carries zero hazard mass."""


class SamplerFailureError(FpcoxError):
    """Metropolis-Hastings target persistently nonfinite for a subject."""

    def __init__(self, subject_id, message=""):
        self.subject_id = subject_id
        super().__init__(f"sampler failure for subject {subject_id!r}: {message}")


class MStepFailureError(FpcoxError):
    """Newton update diverged (50 step halvings exhausted)."""


class SingularDesignError(FpcoxError):
    """Unpenalized design cross-product is singular."""


class DegenerateComponentError(FpcoxError):
    """Rank deficiency while normalizing the component loadings."""

    def __init__(self, component, message=""):
        self.component = component
        super().__init__(
            f"degenerate component {component}: {message}" if message
            else f"degenerate component {component}")


class InsufficientSamplesError(FpcoxError):
    """Too few Monte Carlo draws for a batch-means error estimate."""


class GridSearchError(FpcoxError):
    """Every tuning candidate failed; carries per-candidate diagnostics."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics[:5])
        super().__init__(f"all grid candidates failed: {lines}")


class InvalidStateError(FpcoxError):
    """Object violates a precondition (non-normalized params, unconverged fit)."""


class StaleFitError(FpcoxError):
    """FitResult lacks the final-iteration draws an operation requires."""


class BootstrapUnreliableError(FpcoxError):
    """More than 20% of bootstrap replicates failed to converge."""


class UnsupportedGridError(FpcoxError):
    """Raw-PCA comparator requires a common observation grid."""


class ConfigError(FpcoxError):
    """Malformed or unknown configuration keys."""
