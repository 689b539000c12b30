"""Exception hierarchy shared across the package."""


class FedMILError(Exception):
    """Base class for all errors raised by fedmil."""


class ConfigError(FedMILError, ValueError):
    """A configuration value violates its documented constraints."""


class DatasetError(FedMILError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class MagicMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class DimensionMismatchError(FedMILError, ValueError):
    pass


class UnsupportedSchemeError(FedMILError):
    pass


class InfeasiblePartitionError(FedMILError):
    def __init__(self, message, client=None):
        super().__init__(message)
        self.client = client


class DegenerateClusteringError(FedMILError):
    pass


class DegenerateSimilarityError(FedMILError):
    pass


class EigenDecompositionError(FedMILError):
    pass


class InfeasibleSubsetSizeError(FedMILError):
    pass


class EmptyShardError(FedMILError):
    pass


class FederationDivergedError(FedMILError):
    """Aggregated weights became non-finite. ``diagnostics`` holds the dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MissingRunsError(FedMILError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)
