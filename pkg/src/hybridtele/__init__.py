"""Simulation toolkit for a refractive-objective, metasurface-eyepiece telephoto camera."""

from .config import load_config, production_geometry
from .errors import HybridTeleError
from .metasurface import PhaseProfile
from .system import (
    LensModel,
    SystemGeometry,
    focal_plane,
    magnification_and_efl,
    mtf,
    paraxial_coefficients,
    psf,
    residual_defocus,
    spot_trace,
)

__version__ = "0.1.0"
