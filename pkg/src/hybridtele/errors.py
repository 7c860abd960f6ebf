"""Exception hierarchy shared by all modules.

Every error raised on purpose by the package derives from
:class:`HybridTeleError`, so callers (the CLI in particular) can separate
domain failures from programming errors.
"""

from __future__ import annotations


class HybridTeleError(Exception):
    """Base class for domain errors."""

    def to_dict(self) -> dict:
        out = {"error": type(self).__name__, "message": str(self)}
        for key, value in vars(self).items():
            if not key.startswith("_"):
                out[key] = value
        return out


class SamplingError(HybridTeleError, ValueError):
    """A sampling criterion failed.

    Attributes
    ----------
    criterion : str
        Name of the violated criterion.
    n_required : int or None
        Smallest grid size that would satisfy the criterion, if known.
    """

    def __init__(self, message: str, criterion: str, n_required: int | None = None):
        super().__init__(message)
        self.criterion = criterion
        self.n_required = n_required


class AliasingError(SamplingError):
    """Local fringe frequency of a synthesized field exceeds Nyquist."""


class DegenerateConjugateError(HybridTeleError, ValueError):
    """The objective images the source exactly onto the eyepiece plane."""


class AfocalError(HybridTeleError, ValueError):
    """The configuration has no finite focal plane or EFL."""


class RayMissError(HybridTeleError, ValueError):
    """A traced ray leaves the eyepiece aperture or becomes evanescent."""


class InfeasibleStartError(HybridTeleError, ValueError):
    """The optimizer start point cannot be evaluated."""


class NoRootError(HybridTeleError, ValueError):
    """A bracketing solver found no sign change."""

    def __init__(self, message: str, interval: tuple[float, float]):
        super().__init__(message)
        self.interval = list(interval)


class OutOfRangeError(HybridTeleError, ValueError):
    """A request lies outside the documented validity range."""


class UnfocusedGeometryError(HybridTeleError, ValueError):
    """The geometry is not focused at the requested scene depth."""


class UnknownRadiusError(HybridTeleError, KeyError):
    """A layout radius is not present in the LUT."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""
