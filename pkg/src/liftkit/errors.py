"""Exception hierarchy shared by all liftkit modules.

Each error carries a stable ``code`` so the CLI can map failures to
distinct exit codes and emit machine-readable error lines.
"""


class LiftkitError(Exception):
    """Base class for all toolkit errors."""

    code = "error"
    exit_code = 1


class ConfigError(LiftkitError):
    """Invalid configuration value, unknown key, or malformed config file."""

    code = "config"
    exit_code = 3


class IngestionError(LiftkitError):
    """Empty or malformed corpus input."""

    code = "ingestion"
    exit_code = 5


class ShapeError(LiftkitError):
    """Tensor shape mismatch; message reports both shapes."""

    code = "shape"
    exit_code = 6


class ContractError(LiftkitError):
    """A documented precondition or API contract was violated."""

    code = "contract"
    exit_code = 7


class InputError(LiftkitError):
    """Out-of-range token id or otherwise invalid model input."""

    code = "input"
    exit_code = 8


class MismatchError(LiftkitError):
    """Vocabulary/model/corpus disagree (size or hash)."""

    code = "mismatch"
    exit_code = 4


class MissingFileError(LiftkitError):
    """A required input file does not exist."""

    code = "missing-file"
    exit_code = 2


class TrainingAborted(LiftkitError):
    """Training stopped on a non-finite loss or checkpoint write failure."""

    code = "training-aborted"
    exit_code = 9
