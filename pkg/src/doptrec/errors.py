"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DoptrecError(Exception):
    """Base class for all package errors."""


class ContractViolation(DoptrecError, ValueError):
    """A caller broke a documented precondition (shapes, ranges, types)."""


class InputError(DoptrecError, ValueError):
    """Input data is malformed, e.g. non-finite feature entries."""


class SingularDesignError(DoptrecError, ArithmeticError):
    """The information matrix is singular for every design on the simplex."""

    def __init__(self, message: str, rank: int | None = None, dim: int | None = None):
        super().__init__(message)
        self.rank = rank
        self.dim = dim


class SingularFitError(DoptrecError, ArithmeticError):
    """Normal equations of a regression fit are singular."""


class TrainingRequiredError(DoptrecError, RuntimeError):
    """A model was queried before it was trained."""


class UndefinedMetricError(DoptrecError, ArithmeticError):
    """A metric has a zero denominator."""


class ParseError(DoptrecError, ValueError):
    """A data file line could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        super().__init__(message)
        self.path = path
        self.line = line


class SimulationError(DoptrecError, RuntimeError):
    """A simulation run failed; ``seed`` identifies the run."""

    def __init__(self, message: str, seed: int | None = None, policy: str | None = None):
        super().__init__(message)
        self.seed = seed
        self.policy = policy
