"""Exception hierarchy. CLI exit codes hang off the three top-level families."""


class RfadError(Exception):
    exit_code = 1


class ConfigError(RfadError):
    exit_code = 2


class DataError(RfadError):
    exit_code = 3


class NumericError(RfadError):
    exit_code = 4


class DimensionError(RfadError, ValueError):
    pass


class UsageError(RfadError, RuntimeError):
    pass


class SingularMatrixError(NumericError):
    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(message or f"matrix is not positive definite (Cholesky failed at pivot {pivot})")


class DomainError(NumericError, ValueError):
    pass


class ProvenanceError(RfadError):
    pass


class DegenerateSupportError(RfadError, ValueError):
    pass


class IncompatibleKernelError(ConfigError):
    pass


class VersionMismatchError(DataError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class RecordSizeError(DataError):
    pass


class StaleCacheError(DataError):
    pass


class DivergenceError(NumericError):
    pass
