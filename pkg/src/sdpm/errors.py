"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataError`` and ``ModelError`` exit
with 2, ``InvariantError`` with 3.
"""


class SDPMError(Exception):
    """Base class for all errors raised by this package."""


class DataError(SDPMError):
    """Dataset files are missing, malformed, or fail verification."""


class DigestMismatchError(DataError):
    pass


class ModelError(SDPMError):
    """A model or checkpoint cannot be used."""


class CheckpointError(ModelError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class InvariantError(SDPMError):
    """An internal numerical invariant was violated."""


class UndefinedCorrelationError(ValueError):
    """Pearson correlation requested for a constant sequence."""
