"""
Exception hierarchy for the remapping pipeline.

Every error knows the CLI exit code it maps to and can render itself as a
machine-readable dict, which the CLI prints as one JSON line on stderr.
"""

from typing import Any


class CweRemapError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> dict[str, Any]:
        payload = {
            "error": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
        }
        payload.update({k: _jsonable(v) for k, v in self.context.items()})
        return payload


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_jsonable(v) for v in value]
    return str(value)


# Configuration errors (exit 2)


class ConfigError(CweRemapError):
    exit_code = 2


class StrategyMismatchError(ConfigError):
    """A candidate strategy was requested for an old CWE it does not apply to."""


class OutputLockedError(ConfigError):
    """Another process holds the output directory."""


# Data errors (exit 3)


class DataError(CweRemapError):
    exit_code = 3


class TripleValidationError(DataError):
    """A triple or entity id violates the namespace rules."""


class GraphFrozenError(DataError):
    """Mutation attempted on a frozen knowledge graph."""


class UnknownCweError(DataError, KeyError):
    """A CWE id is not part of the loaded catalog."""

    def __str__(self) -> str:
        return self.message


class CweKindError(DataError):
    """A CWE query was applied to a node of the wrong kind."""


class UnknownEntityError(DataError, KeyError):
    """An entity or relation has no row in the embedding model."""

    def __str__(self) -> str:
        return self.message


class MalformedDocumentError(DataError):
    """An input document could not be parsed.

    The byte offset of the failure, when known, is available as ``offset``.
    """

    def __init__(self, message: str, offset: int | None = None, **context: Any):
        super().__init__(message, offset=offset, **context)
        self.offset = offset


class DateOutOfRangeError(DataError):
    """A snapshot date lies outside the coverage of the inputs."""


class ModelFormatError(DataError):
    """A model file is truncated, corrupt or from another format version."""


class LeakageError(DataError):
    """An evaluation triple is also part of the training graph."""


class EmptyInputError(DataError):
    """A metric was requested over an empty input."""


class UnlabeledCaseError(DataError):
    """A case without ground truth (or without a ranking) reached evaluation."""


class FetchError(DataError):
    """A remote download failed."""


# Numeric errors (exit 4)


class DivergenceError(CweRemapError):
    """Training produced a non-finite loss."""

    exit_code = 4
