"""
Exception hierarchy for the planner.

Every error carries a ``category`` used as the stderr prefix by the CLI and
mapped to an HTTP status by the planning routes.
"""


class PlannerError(Exception):
    """Base class for all planner errors"""

    category = "error"


class ConfigurationError(PlannerError, ValueError):
    category = "configuration"


class RangeError(PlannerError, ValueError):
    category = "range"


class ContractError(PlannerError, ValueError):
    category = "contract"


class IncompleteSequenceError(ContractError):
    category = "incomplete-sequence"


class DegenerateInputError(PlannerError, ValueError):
    category = "degenerate-input"


class GenerationError(PlannerError):
    category = "generation"


class SaturationError(PlannerError):
    category = "saturation"


class NonFiniteError(PlannerError):
    category = "non-finite"


class StaleCacheError(PlannerError):
    category = "stale-cache"


class FullStepFallback(PlannerError):
    """Raised by a lite step when the previous plan cannot be carried over"""

    category = "full-step-fallback"


class StorageError(PlannerError):
    category = "storage"


class ParseError(PlannerError):
    category = "parse"

    def __init__(self, message: str, line_number: int = 0):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number
