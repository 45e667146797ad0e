"""Exception hierarchy shared by the fitting, selection and I/O layers."""

from __future__ import annotations


class MeanAICError(Exception):
    """Base class for all package errors."""


# --------------------------------------------------------------------- #
# per-cluster GLM fitting
# --------------------------------------------------------------------- #


class FitError(MeanAICError):
    """A single-cluster GLM fit could not produce a usable estimate."""

    def __init__(self, message: str, cluster_id=None):
        super().__init__(message)
        self.cluster_id = cluster_id


class DegenerateDesign(FitError):
    """The active design matrix is rank deficient."""

    def __init__(self, message: str, columns, cluster_id=None):
        super().__init__(message, cluster_id)
        self.columns = tuple(columns)


class TooFewObservations(FitError):
    pass


class NonFiniteIterate(FitError):
    """Coefficients blew up during iteration (separation or divergence)."""


class DomainError(MeanAICError, ValueError):
    pass


# --------------------------------------------------------------------- #
# selection / marginal likelihood
# --------------------------------------------------------------------- #


class LatticeTooLarge(MeanAICError, ValueError):
    pass


class AllClustersSkipped(MeanAICError):
    pass


class QuadratureModeFailure(MeanAICError):
    pass


class NonConvergence(MeanAICError):
    pass


# --------------------------------------------------------------------- #
# I/O
# --------------------------------------------------------------------- #


class DataError(MeanAICError):
    """Problem with an input data file. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParseError(DataError):
    pass


class MissingColumn(DataError):
    pass


class InvalidResponse(DataError):
    pass


class ConfigError(MeanAICError):
    """Invalid scenario configuration; ``key`` is the dotted key path."""

    def __init__(self, message: str, key: str | None = None):
        if key:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key
