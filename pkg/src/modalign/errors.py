"""Exception hierarchy shared by all modules.

Three roots map onto CLI exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is a plain bug and escapes as-is.
"""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ToolkitError):
    """Invalid or inconsistent experiment configuration."""


class DataError(ToolkitError):
    """Problem with input data, files, or batch composition."""


class ParseError(DataError):
    """Malformed input file (CSV, PGM, JSON)."""


class PairingError(DataError):
    """RGB and IR rows are not identity-aligned."""


class SamplingError(DataError):
    """A batch cannot satisfy the mining requirements (positives/negatives)."""


class SetupError(DataError):
    """Retrieval set violates its preconditions (e.g. query id missing from gallery)."""


class CheckpointError(DataError):
    """Checkpoint file has the wrong magic, version, or tensor layout."""


class NumericError(ToolkitError):
    """A numeric contract was violated."""


class InvalidArgumentError(NumericError):
    """Argument outside its documented domain (non-finite, wrong sign, ...)."""


class ShapeError(NumericError):
    """Array shapes or labels do not line up."""


class DegenerateInputError(NumericError):
    """Input is technically valid but numerically degenerate (e.g. all-zero distances)."""


class InsufficientSamplesError(NumericError):
    """Too few samples for the requested statistic."""


class ContractViolationError(NumericError):
    """Internal invariant broken (e.g. stale backward cache)."""
