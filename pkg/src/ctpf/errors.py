"""Exception hierarchy shared across the package.

Numerical failures carry enough context (time, particle index) to locate
the failing solve inside a filter run.
"""

from __future__ import annotations


class CtpfError(Exception):
    """Base class for all package errors."""


class ValidationError(CtpfError, ValueError):
    """Bad arguments or malformed configuration/input files."""


class NumericalError(CtpfError):
    """Base class for runtime numerical failures (divergence, degeneracy)."""


class DivergenceError(NumericalError):
    """Integration produced a non-finite state.

    Attributes:
        time: model time at which the state went non-finite.
        particle: index of the failing particle in a batched solve, or None.
    """

    def __init__(self, message: str, *, time: float | None = None,
                 particle: int | None = None):
        super().__init__(message)
        self.time = time
        self.particle = particle


class ProposalExplosionError(NumericalError):
    """The scaled drift correction |u| exceeded the hard bound u_max.

    Raised instead of silently producing log-weights of -inf; bounded u is
    the per-step stand-in for the integrability the importance weight needs.
    """

    def __init__(self, message: str, *, time: float | None = None,
                 particle: int | None = None):
        super().__init__(message)
        self.time = time
        self.particle = particle


class DegeneracyError(NumericalError):
    """All particle weights collapsed to zero (or became non-finite)."""
