"""Exception types shared across the package."""


class FedClusterError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(FedClusterError, ValueError):
    """Input violates a documented precondition (shape, range, finiteness)."""


class SingularCovarianceError(FedClusterError):
    """A covariance matrix could not be factorized even after ridge repair."""


class DegenerateRowError(FedClusterError):
    """A row that must carry mass is identically zero."""


class AllSamplesDiscardedError(FedClusterError):
    """Every sample weight in a batch is zero; the gradient step must be skipped."""


class DivergenceError(FedClusterError):
    """Training produced non-finite values; the current step was aborted."""


class DatasetFormatError(FedClusterError):
    """A dataset file does not match the binary format contract."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FederatedRunError(FedClusterError):
    """A federated run aborted; carries the reports collected so far."""

    def __init__(self, message, reports=None):
        super().__init__(message)
        self.reports = list(reports) if reports is not None else []
