"""Exception hierarchy shared across the toolkit.

The command line maps these to exit codes: configuration problems exit 2,
solver failures exit 3, invariant violations under --strict exit 4.
"""


class PerihomError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(PerihomError):
    """Invalid cell or domain construction (grain touching the boundary,
    non-integer tiling count, grid budget exceeded)."""


class ConfigError(PerihomError):
    """Malformed or inconsistent run configuration."""


class SolverError(PerihomError):
    """Linear-solver nonconvergence, singular systems, or iteration caps hit."""


class InvariantViolation(PerihomError):
    """A physical invariant (positivity, maximum principle, mass budget) was
    violated during a run executed in strict mode."""
