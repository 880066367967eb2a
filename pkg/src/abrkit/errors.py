"""Exception hierarchy shared by every abrkit module."""

from __future__ import annotations


class AbrkitError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit status."""


class ValidationError(AbrkitError, ValueError):
    """Input data violates a type invariant."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None) -> None:
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line


# data-model
class MalformedLine(ValidationError):
    pass


class NonMonotonicTimestamp(ValidationError):
    pass


class NonPositiveBandwidth(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class MonotonicityViolation(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class DanglingSessionRef(ValidationError):
    pass


class ScoreOutOfRange(ValidationError):
    pass


class EmptyQuery(ValidationError):
    pass


class DegenerateSplit(AbrkitError):
    pass


# net-sim
class OffsetOutOfRange(AbrkitError, ValueError):
    pass


class EpisodeFinished(AbrkitError):
    pass


class PolicyError(AbrkitError):
    """A bitrate selector failed; carries the chunk index it failed on."""

    def __init__(self, chunk_index: int, cause: BaseException) -> None:
        super().__init__(f"policy failed at chunk {chunk_index}: {cause!r}")
        self.chunk_index = chunk_index


# tinynet
class NonFiniteInput(AbrkitError, ValueError):
    pass


class ShapeMismatch(AbrkitError, ValueError):
    pass


# qoe-rank
class InsufficientSessions(AbrkitError):
    pass


class EmptyTestSet(AbrkitError):
    pass


class UnknownSession(AbrkitError, KeyError):
    pass


# policy-rl
class EmptyTrajectory(AbrkitError, ValueError):
    pass


class InvalidClipConfig(AbrkitError, ValueError):
    pass


# trace-select
class UnknownArm(AbrkitError, KeyError):
    pass


class EmptyPool(AbrkitError):
    pass
