"""Exception types shared across the solver.

The CLI maps these onto process exit codes: configuration and input
problems (ValidationError and subclasses) exit with 2, numerical
failures (NumericalError and subclasses) with 3.
"""


class FragFemError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FragFemError):
    """A configuration value, scenario key or argument is invalid."""


class ParseError(ValidationError):
    """Text input (expression or scenario file) failed to parse.

    Carries a human-readable position so the offending token can be
    found in the source.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        elif column is not None:
            message = f"{message} (column {column})"
        super().__init__(message)


class OutOfDomainError(FragFemError):
    """A point lies outside the computational box beyond tolerance."""


class NumericalError(FragFemError):
    """Base class for failures of the numerical machinery."""


class SingularMatrixError(NumericalError):
    """A linear system factorization failed or is unusable."""


class NonFiniteError(NumericalError):
    """A matrix, vector or state picked up NaN or Inf entries."""


class QuadratureConvergenceError(NumericalError):
    """Adaptive reference quadrature did not reach its tolerance.

    The best available estimate and the last observed gap are kept so
    callers can decide whether the partial answer is still useful.
    """

    def __init__(self, message, estimate=None, gap=None):
        self.estimate = estimate
        self.gap = gap
        super().__init__(message)


class DegenerateSequenceError(NumericalError):
    """An error sequence is unusable for convergence-order estimates."""
