"""Exception taxonomy shared across the package."""


class SarlabError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(SarlabError, ValueError):
    """Operands have incompatible or unexpected shapes."""


class ContractError(SarlabError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateBatchError(ContractError):
    """Batch statistics are undefined, e.g. batch norm over a single sample."""


class ZeroVectorError(ContractError):
    """Similarity of a zero vector is undefined."""


class NumericError(SarlabError, ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class DataError(SarlabError):
    """Dataset files or manifests are missing, malformed, or inconsistent."""


class CheckpointError(DataError):
    """A checkpoint file failed validation."""


class CliUsageError(SarlabError):
    """Bad command-line arguments."""
