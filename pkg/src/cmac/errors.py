"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/config problems -> 1,
data and file-format problems -> 2, failed numeric checks -> 3.
"""


class CmacError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CmacError):
    """Shape or extent mismatch between tensors. Message names both shapes."""


class ContractError(CmacError):
    """API misuse: mixing tapes, backward from a non-scalar, bad op arguments."""


class FormatError(CmacError):
    """Malformed byte stream or text record.

    ``offset`` is the byte position of the first unreadable element when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class CheckpointError(CmacError):
    """Checkpoint does not match the model: missing/extra tensor or wrong shape."""


class DatasetError(CmacError):
    """Dataset directory inconsistent with its manifest."""


class SamplingError(CmacError):
    """No usable foreground or background proposals for an image."""


class ConfigError(CmacError):
    """Unknown configuration key or unparsable value. Message names the key."""


class EvaluationError(CmacError):
    """Metric cannot be computed (e.g. no class has a defined AP) or an
    evaluation artifact cannot be written."""


class CheckFailure(CmacError):
    """A numeric self-check (gradient check, invariant sweep) did not pass."""
