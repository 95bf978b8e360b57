"""Exception types shared across the package."""

from __future__ import annotations


class RaredxError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RaredxError):
    """A knowledge base, artifact, or request failed schema or invariant checks."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class UnknownCodeError(RaredxError):
    """A symptom or disease code is not part of the ontology / knowledge base."""


class InfeasibleError(RaredxError):
    """A requested construction cannot be satisfied (counts on impossible cells,
    synthesis parameters that exceed the symptom pool, and so on)."""


class ConvergenceError(RaredxError):
    """An iterative solver exhausted its budget before reaching tolerance."""

    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ContradictionError(RaredxError):
    """Evidence contradicts earlier evidence after rule propagation."""

    def __init__(self, code: str, other: str, message: str | None = None):
        super().__init__(message or f"answer for {code!r} contradicts earlier evidence involving {other!r}")
        self.code = code
        self.other = other


class TooImpreciseError(RaredxError):
    """Imprecise evidence expands past the enumeration budget."""


class ArtifactError(RaredxError):
    """A stored model or policy artifact is unreadable, corrupted, or incompatible."""
