"""Exception hierarchy shared by every layer."""

from __future__ import annotations


class TraceError(Exception):
    """Base class for all runtime errors raised by tracesim."""


class ChainCorrupt(TraceError):
    pass


class UnknownEventKind(TraceError):
    pass


class EmptyCorpus(TraceError):
    pass


class InvalidRuleSet(TraceError):
    pass


class UnsupportedTaskType(TraceError):
    pass


class EmptyInput(TraceError):
    pass


class NoNumericFeatures(TraceError):
    pass


class NonPositiveHorizon(TraceError):
    pass


class MissingRelevanceLabels(TraceError):
    pass


class PhaseViolation(TraceError):
    pass


class TooFewVerdicts(TraceError):
    pass


class ZeroMinimalCost(TraceError):
    pass


class InsufficientWindow(TraceError):
    pass


class NotEscalated(TraceError):
    pass


class EmptyRun(TraceError):
    pass


class InadequateDeployment(TraceError):
    pass


class NoAdequateComponent(TraceError):
    pass


class SingleWindow(TraceError):
    pass


class WeightMismatch(TraceError):
    pass


class IncompleteRun(TraceError):
    pass


class NoGroundTruth(TraceError):
    pass


class UnknownPreset(TraceError):
    pass


class TickLimitExceeded(TraceError):
    pass


class ConfigInvalid(TraceError):
    """Scenario config failed validation.

    ``problems`` holds ``(json_path, message)`` pairs, one per violation.
    """

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        lines = [f"{path}: {msg}" for path, msg in self.problems]
        super().__init__("invalid scenario config:\n  " + "\n  ".join(lines))
