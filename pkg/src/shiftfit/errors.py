"""Exception types shared across the package."""


class ShiftfitError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(ShiftfitError, ValueError):
    """A model parameter violates its domain (non-finite, out of range)."""


class LinkDomainError(ShiftfitError, ValueError):
    """A value lies outside the domain of its componentwise link."""


class DegenerateLikelihoodError(ShiftfitError):
    """A trial has zero likelihood under every latent state.

    Carries enough context (subject / task / trial) to locate the data
    problem that produced it.
    """

    def __init__(self, message: str, subject=None, task=None, trial=None):
        super().__init__(message)
        self.subject = subject
        self.task = task
        self.trial = trial


class CanonicalizationError(ShiftfitError):
    """Loading matrix cannot be brought to canonical form."""


class OptimizerError(ShiftfitError):
    """An inner solver failed to reach its convergence criterion."""

    def __init__(self, message: str, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class FitError(ShiftfitError):
    """A model fit failed; ``diagnostics`` holds per-restart details."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ConfigError(ShiftfitError, ValueError):
    """A run configuration document is malformed or inconsistent."""


class DataError(ShiftfitError, ValueError):
    """An input data file violates the documented layout."""
