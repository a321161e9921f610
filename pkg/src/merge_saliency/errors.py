"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericFault -> 4.
"""


class MergeSaliencyError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MergeSaliencyError):
    """Invalid configuration: bad geometry, unknown feature names, bad schedule."""


class DataError(MergeSaliencyError):
    """Problem with input data or with a request the data cannot satisfy."""


class ParseError(DataError):
    """Malformed input row; message names the offending row."""


class IntegrityError(DataError):
    """Structurally valid input violating an ordering/consistency invariant."""


class RejectionError(DataError):
    """Operation rejected its input (too few frames, demos, or points)."""


class ContractViolation(DataError):
    """Caller broke an operation precondition (shape/length mismatch)."""


class NumericFault(MergeSaliencyError):
    """NaN or Inf appeared during numeric evaluation."""
