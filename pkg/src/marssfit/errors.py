"""Exception types and shared numerical tolerances."""

# Absolute threshold below which a variance diagonal is treated as a
# structural zero (fully determined state row, zero innovation variance).
ZERO_DIAG_TOL = 1e-12

# Relative tolerance for the data-consistency check on zero-variance
# observation rows: |innovation| <= CONSISTENCY_TOL * (1 + |y|).
CONSISTENCY_TOL = 1e-8

# Eigenvalue floor when validating materialized covariance matrices.
PSD_EIG_FLOOR = -1e-10


class ModelSpecError(ValueError):
    """The model specification is structurally invalid."""


class IdentifiabilityError(RuntimeError):
    """A normal matrix in an update equation is singular.

    Carries the name of the free-value vector that cannot be solved for.
    """

    def __init__(self, param_name, message=None):
        self.param_name = param_name
        super().__init__(message or f"free values of {param_name!r} are not identifiable "
                                    f"(singular normal matrix)")


class FilterInconsistencyError(RuntimeError):
    """Data contradict a zero-variance observation row.

    The marginal log-likelihood is +inf in the sense that the model assigns
    the data probability zero; the sentinel is stored on the exception.
    """

    def __init__(self, message):
        self.loglik = float("inf")
        super().__init__(message)


class FitError(RuntimeError):
    """The EM iteration could not proceed (propagated step failures)."""
