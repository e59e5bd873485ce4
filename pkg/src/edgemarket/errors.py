"""Exception types shared across the package."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument or field is outside its documented domain."""


class SetupError(RuntimeError):
    """A scenario is infeasible before any solving starts (e.g. unstable floor demand)."""
