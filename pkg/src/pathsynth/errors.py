"""Exception hierarchy shared by every stage of the toolkit."""

from __future__ import annotations


class PathSynthError(Exception):
    """Base class for all toolkit errors."""


# dataset_io

class ParseError(PathSynthError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class SchemaError(ParseError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None,
                 path: str | None = None):
        self.field = field
        super().__init__(message, line=line, path=path)


class EmptyInput(PathSynthError, ValueError):
    pass


class KindMismatch(PathSynthError, ValueError):
    pass


# model_backends

class BackendError(PathSynthError):
    pass


class TransientBackendError(BackendError):
    """Raised by a backend for failures worth retrying (timeouts, 429, 5xx)."""


class BackendUnavailable(BackendError):
    pass


class ContextTooLong(BackendError, ValueError):
    pass


class MalformedResponse(BackendError, ValueError):
    pass


class DimensionMismatch(PathSynthError, ValueError):
    pass


class ZeroVector(PathSynthError, ValueError):
    pass


# tag_protocol

class TagError(PathSynthError, ValueError):
    """A turn that violates the tag grammar. ``offset`` is a UTF-8 byte offset."""

    UNCLOSED = "unclosed tag"
    UNKNOWN = "unknown tag"
    MULTIPLE_BODIES = "multiple bodies"
    EMPTY_ACTION = "empty action block"
    MALFORMED_SEARCH = "malformed Search call"
    MALFORMED_SELECT = "malformed select block"
    STRAY_TEXT = "stray text"
    MISSING_BODY = "missing body"
    DUPLICATE_THINK = "duplicate think block"

    def __init__(self, kind: str, offset: int, detail: str = ""):
        self.kind = kind
        self.offset = offset
        self.detail = detail
        msg = f"{kind} at byte {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DialectMismatch(PathSynthError, ValueError):
    pass


class BindingError(PathSynthError, ValueError):
    pass


# synthesis

class MalformedPlan(PathSynthError):
    pass


class StepBudgetExceeded(PathSynthError):
    pass


class EmptyAnswer(PathSynthError):
    pass


class GroundingError(PathSynthError):
    pass


# trajectory_store

class TrajectoryError(PathSynthError):
    """Base for trajectory assembly rejections."""


class CountMismatch(TrajectoryError):
    pass


class AnswerMismatch(TrajectoryError):
    pass


class CitationError(TrajectoryError):
    pass


class ObservationMismatch(TrajectoryError):
    pass


# agent_runtime / eval

class IndexMissing(PathSynthError):
    pass


class UnknownSample(PathSynthError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class UnresolvedEntity(PathSynthError):
    pass


class IdMismatch(PathSynthError, ValueError):
    pass
