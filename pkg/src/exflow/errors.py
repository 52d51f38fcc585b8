"""Exception taxonomy shared across the package.

Each class maps to one operator-visible failure mode; the CLI translates
them to stable exit codes (see ``cli.EXIT_CODES``).
"""


class ExflowError(Exception):
    """Base class for all package errors."""


class ConfigError(ExflowError):
    """Malformed or contradictory run configuration."""


class DataError(ExflowError):
    """Unusable input data (parse failures, non-finite values, bad labels)."""


class DimensionError(ExflowError):
    """Shape or dimension mismatch between arrays, model and data."""


class ContractError(ExflowError):
    """A call violated an operation's precondition."""


class DivergenceError(ExflowError):
    """Training produced a non-finite loss or gradient."""


class UnknownConditionError(ContractError):
    """Lookup of a (task, label) pair that was never registered."""


class LabelSpaceError(ContractError):
    """Tasks do not share a label space where an operation requires it."""


class StaleThresholdError(ContractError):
    """An outlier threshold was calibrated against a different model version."""


class PersistError(ExflowError):
    """Base class for model-file load/save failures."""


class MagicError(PersistError):
    """File does not start with the expected magic bytes."""


class VersionError(PersistError):
    """File declares an unsupported format version."""


class TruncationError(PersistError):
    """File ended before the declared layout was complete."""


class ChecksumError(PersistError):
    """Stored checksum does not match the file body."""
