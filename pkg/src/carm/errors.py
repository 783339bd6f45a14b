"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CarmError(Exception):
    """Base class. ``code`` is the wire name used in HTTP error bodies."""

    status = 400

    def __init__(self, message: str = "", *, field: str | None = None) -> None:
        super().__init__(message or self.__class__.__name__)
        self.field = field

    @property
    def code(self) -> str:
        return self.__class__.__name__

    def to_dict(self) -> dict:
        body = {"error": self.code, "message": str(self)}
        if self.field is not None:
            body["field"] = self.field
        return body


# spec validation
class SpecError(CarmError, ValueError):
    pass


class UnknownScope(SpecError):
    pass


class NonPositiveQuota(SpecError):
    pass


class EmptyTarget(SpecError):
    pass


class MalformedSpec(SpecError):
    pass


class IllegalTransition(CarmError, ValueError):
    status = 409


# cluster lookups
class UnknownTarget(CarmError, LookupError):
    pass


class UnknownDeployment(CarmError, LookupError):
    status = 404


class UnknownNode(CarmError, LookupError):
    status = 404


class InsufficientCapacity(CarmError, RuntimeError):
    status = 409


class ScaleBelowOne(CarmError, ValueError):
    pass


class MalformedScenario(CarmError, ValueError):
    pass


# metrics / io
class UnknownMetric(CarmError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return self.args[0] if self.args else self.code


class IoFailure(CarmError, OSError):
    status = 500


# controller
class UnknownAgent(CarmError, LookupError):
    status = 404


# watcher
class NoBaseline(CarmError, RuntimeError):
    status = 409


class PreconditionViolation(CarmError, RuntimeError):
    status = 409


# drl
class MissingFeature(CarmError, ValueError):
    pass


class EmptyDataset(CarmError, ValueError):
    pass


class EmptyWindow(CarmError, ValueError):
    pass


class CorruptModel(CarmError, ValueError):
    status = 500


class UnknownExperiment(CarmError, ValueError):
    pass
