"""Sampled scalar wavefronts and Fresnel propagation.

Conventions
-----------
All lengths are in meters. A field sample with index ``i`` sits at
``origin + (i - N/2) * pitch``, so the grid center is sample ``N/2``.
The phase convention is ``exp(+j k r^2 / 2z)`` for a wave diverging from a
point a distance ``z`` behind the plane; a thin converging lens multiplies
by ``exp(-j k r^2 / 2f)``.

Two Fresnel integrators are provided and chosen automatically: the
transfer-function (angular spectrum of the Fresnel kernel) method when
``pitch**2 >= wavelength * z / N_fft`` and the single-FFT impulse-response
method otherwise, where ``N_fft`` is the padded FFT length.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import AliasingError, OutOfRangeError, SamplingError

logger = logging.getLogger(__name__)

WAVELENGTH_MIN = 380e-9
WAVELENGTH_MAX = 700e-9
_ENERGY_EPS = 1e-6


class PhaseLike(Protocol):
    """Anything with a design wavelength and a 2-D phase evaluator."""

    wavelength: float

    def phase(self, x, y): ...


@dataclass(frozen=True)
class GridSpec:
    """Square sampling grid: ``n`` samples per side at ``pitch`` meters."""

    n: int
    pitch: float
    origin: tuple[float, float] = (0.0, 0.0)

    def axis(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.pitch


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Immutable sampled complex wavefront.

    Parameters
    ----------
    amplitude : ndarray, shape (N, N)
        Complex samples. Copied and frozen on construction.
    pitch : float
        Sample spacing in meters.
    wavelength : float
        Vacuum wavelength in meters, within [380 nm, 700 nm].
    origin : tuple of float
        Physical coordinate of the grid center (sample ``N/2``).
    """

    amplitude: np.ndarray
    pitch: float
    wavelength: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        a = np.array(self.amplitude, dtype=np.complex128, copy=True)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"field must be square, got shape {a.shape}")
        n = a.shape[0]
        if n % 2 or n < 64:
            raise ValueError(f"field size must be even and >= 64, got {n}")
        if not (self.pitch > 0 and math.isfinite(self.pitch)):
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        lo, hi = WAVELENGTH_MIN * (1 - 1e-9), WAVELENGTH_MAX * (1 + 1e-9)
        if not lo <= self.wavelength <= hi:
            raise ValueError(f"wavelength {self.wavelength * 1e9:.1f} nm outside [380, 700] nm")
        if not np.all(np.isfinite(a)):
            raise ValueError("field contains non-finite samples")
        a.setflags(write=False)
        object.__setattr__(self, "amplitude", a)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n(self) -> int:
        return self.amplitude.shape[0]

    @property
    def k(self) -> float:
        return 2.0 * math.pi / self.wavelength

    @property
    def extent(self) -> float:
        return self.n * self.pitch

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical x and y sample coordinates (1-D)."""
        base = (np.arange(self.n) - self.n // 2) * self.pitch
        return base + self.origin[0], base + self.origin[1]

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.axes()
        return np.meshgrid(x, y, indexing="xy")

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2

    @property
    def power(self) -> float:
        """Integrated power ``sum |U|^2 * pitch^2`` (invariant under pitch changes)."""
        return float(np.sum(self.intensity) * self.pitch**2)

    def replace(self, amplitude=None, pitch=None, origin=None) -> "ComplexField":
        return ComplexField(
            self.amplitude if amplitude is None else amplitude,
            self.pitch if pitch is None else pitch,
            self.wavelength,
            self.origin if origin is None else origin,
        )


@dataclass(frozen=True)
class ApertureMask:
    """Transmittance mask of a circular aperture.

    Parameters
    ----------
    diameter : float
        Aperture diameter in meters.
    center : tuple of float
        Aperture center; a lateral decenter moves it.
    transmittance : callable, optional
        ``f(x, y) -> values`` giving the in-aperture amplitude transmittance.
        Values are clipped to [0, 1] and forced to zero outside the disk.
        Default is a hard, fully transmitting disk.
    """

    diameter: float
    center: tuple[float, float] = (0.0, 0.0)
    transmittance: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError("aperture diameter must be positive")

    @property
    def area(self) -> float:
        return math.pi * self.diameter**2 / 4.0

    def __call__(self, x, y) -> np.ndarray:
        dx = np.asarray(x) - self.center[0]
        dy = np.asarray(y) - self.center[1]
        inside = dx**2 + dy**2 <= (self.diameter / 2.0) ** 2
        if self.transmittance is None:
            return inside.astype(np.float64)
        t = np.clip(np.asarray(self.transmittance(x, y), dtype=np.float64), 0.0, 1.0)
        return np.where(inside, t, 0.0)


def _even_ceil(value: float) -> int:
    n = int(math.ceil(value - 1e-9))
    return n + (n % 2)


def point_source_field(x0, z0: float, wavelength: float, grid: GridSpec, *, check: bool = True) -> ComplexField:
    """Spherical wave from a point source, sampled on a plane.

    Parameters
    ----------
    x0 : (float, float)
        Lateral source position in meters.
    z0 : float
        Source distance in front of the plane (meters). ``numpy.inf`` gives the
        collimated limit (uniform phase).
    wavelength : float
        Wavelength in meters.
    grid : GridSpec
        Sampling of the output plane.

    Returns
    -------
    ComplexField
        ``U0(x) ∝ exp(j k |x0 - x|^2 / (2 z0))`` normalized to unit power.

    Raises
    ------
    OutOfRangeError
        If ``z0 == 0``.
    AliasingError
        If the fringe frequency at the grid edge exceeds Nyquist.
    """
    if z0 == 0:
        raise OutOfRangeError("point source at z0 = 0 is singular")
    n = grid.n
    base = grid.axis()
    x = base + grid.origin[0]
    y = base + grid.origin[1]
    X, Y = np.meshgrid(x, y, indexing="xy")
    k = 2.0 * math.pi / wavelength
    if math.isinf(z0):
        amp = np.ones((n, n), dtype=np.complex128)
    else:
        r2 = (X - x0[0]) ** 2 + (Y - x0[1]) ** 2
        if check:
            reach = max(np.max(np.abs(x - x0[0])), np.max(np.abs(y - x0[1])))
            fmax = reach / (wavelength * abs(z0))
            if fmax > 0.5 / grid.pitch:
                need = wavelength * abs(z0) / (2.0 * reach)
                raise AliasingError(
                    f"point-source fringe frequency {fmax * 1e-3:.3g} cyc/mm at the grid edge exceeds "
                    f"Nyquist {0.5e-3 / grid.pitch:.3g} cyc/mm; need N >= {_even_ceil(n * grid.pitch / need)} "
                    "at the same window",
                    criterion="point-source Nyquist",
                    n_required=_even_ceil(n * grid.pitch / need),
                )
        amp = np.exp(1j * k / (2.0 * z0) * r2)
    amp /= math.sqrt(n * n * grid.pitch**2)
    return ComplexField(amp, grid.pitch, wavelength, grid.origin)


def _support_halfwidth(power: np.ndarray, spacing: float, frac: float) -> float:
    """Half-width of the smallest centered square holding ``frac`` of the power."""
    n = power.shape[0]
    idx = np.abs(np.arange(n) - n // 2)
    cheb = np.maximum(idx[None, :], idx[:, None])
    ring = np.bincount(cheb.ravel(), weights=power.ravel(), minlength=n // 2 + 1)
    total = ring.sum()
    if total <= 0:
        return 0.0
    cum = np.cumsum(ring) / total
    return float(np.searchsorted(cum, frac) + 1) * spacing


def _pad(a: np.ndarray, size: int) -> np.ndarray:
    n = a.shape[0]
    if size == n:
        return a
    out = np.zeros((size, size), dtype=np.complex128)
    lo = size // 2 - n // 2
    out[lo:lo + n, lo:lo + n] = a
    return out


def _crop(a: np.ndarray, size: int) -> np.ndarray:
    n = a.shape[0]
    if size == n:
        return a
    lo = n // 2 - size // 2
    return a[lo:lo + size, lo:lo + size]


def select_method(pitch: float, wavelength: float, z: float, n_fft: int) -> str:
    """Return ``"transfer"`` or ``"impulse"`` by the kernel-sampling criterion."""
    return "transfer" if pitch**2 >= wavelength * z / n_fft else "impulse"


def fresnel_propagate(
    field: ComplexField,
    z: float,
    *,
    method: str = "auto",
    pad: int = 2,
    crop: bool = True,
    input_curvature: float = 0.0,
    check: bool = True,
) -> ComplexField:
    """Fresnel-propagate a field by ``z`` meters.

    Parameters
    ----------
    field : ComplexField
        Input field.
    z : float
        Propagation distance (meters, >= 0). ``z == 0`` returns the input.
    method : {"auto", "transfer", "impulse"}
        Integrator. ``"auto"`` applies the kernel-sampling criterion.
    pad : int
        Zero-padding factor applied before the FFT.
    crop : bool
        Crop back to the input size after propagation.
    input_curvature : float
        Known paraxial curvature ``c`` (1/m) of the input, in the sense
        ``U ~ exp(j k c r^2 / 2)``. Only used by the impulse-response sampling
        check: the chirp actually sampled is ``c + 1/z``. Converging beams
        thus pass the check even when the bare chirp would alias.
    check : bool
        Run the sampling checks.

    Returns
    -------
    ComplexField
        The propagated field. Transfer-function output keeps the input pitch;
        impulse-response output has pitch ``wavelength * z / (pad * N * pitch)``.

    Raises
    ------
    SamplingError
        Naming the failed criterion and the smallest adequate N.
    """
    if z == 0:
        return field
    if z < 0:
        raise ValueError("propagation distance must be non-negative")
    if method not in ("auto", "transfer", "impulse"):
        raise ValueError(f"unknown method {method!r}")
    n, dx, lam = field.n, field.pitch, field.wavelength
    n_fft = pad * n
    chosen = select_method(dx, lam, z, n_fft) if method == "auto" else method
    logger.debug("fresnel_propagate: z=%.6g m, N=%d, pad=%d, method=%s (requested %s)", z, n, pad, chosen, method)
    k = 2.0 * math.pi / lam
    u = _pad(field.amplitude, n_fft)
    if chosen == "transfer":
        if check:
            if dx**2 < lam * z / n_fft:
                need = _even_ceil(lam * z / dx**2 / pad)
                raise SamplingError(
                    f"transfer-function kernel undersampled: pitch^2 = {dx**2:.3e} m^2 < lambda*z/N = "
                    f"{lam * z / n_fft:.3e} m^2; need N >= {need} (or use the impulse-response method)",
                    criterion="transfer-function kernel sampling (pitch^2 >= lambda z / N)",
                    n_required=need,
                )
        spec = np.fft.fft2(np.fft.ifftshift(u))
        fx = np.fft.fftfreq(n_fft, dx)
        if check:
            r_sig = _support_halfwidth(np.abs(u) ** 2, dx, 1 - _ENERGY_EPS)
            f_sig = _support_halfwidth(np.fft.fftshift(np.abs(spec) ** 2), 1.0 / (n_fft * dx), 1 - _ENERGY_EPS)
            reach = r_sig + lam * z * f_sig
            if reach > n_fft * dx / 2:
                need = _even_ceil(2 * reach / dx / pad)
                raise SamplingError(
                    f"field spreads to {reach * 1e3:.4g} mm over z, beyond the padded half-window "
                    f"{n_fft * dx / 2e-3:.4g} mm; need N >= {need} at this pitch",
                    criterion="transfer-function window containment",
                    n_required=need,
                )
        h = np.exp(-1j * math.pi * lam * z * (fx[None, :] ** 2 + fx[:, None] ** 2))
        out = np.fft.fftshift(np.fft.ifft2(spec * h)) * np.exp(1j * k * z)
        out_pitch = dx
    else:
        if check:
            curv = abs(input_curvature + 1.0 / z)
            if curv > 0:
                r_sig = _support_halfwidth(np.abs(u) ** 2, dx, 1 - _ENERGY_EPS)
                fmax = curv * r_sig / lam
                if fmax > 0.5 / dx:
                    dx_need = lam / (2.0 * curv * r_sig)
                    need = _even_ceil(n * dx / dx_need)
                    raise SamplingError(
                        f"impulse-response chirp undersampled: local frequency {fmax * 1e-3:.4g} cyc/mm at the "
                        f"field edge exceeds Nyquist {0.5e-3 / dx:.4g} cyc/mm; need N >= {need} at this window",
                        criterion="impulse-response chirp sampling",
                        n_required=need,
                    )
        base = (np.arange(n_fft) - n_fft // 2) * dx
        q = np.exp(1j * k / (2.0 * z) * base**2)
        g = u * q[None, :] * q[:, None]
        spec = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(g))) * dx * dx
        out_pitch = lam * z / (n_fft * dx)
        xo = (np.arange(n_fft) - n_fft // 2) * out_pitch
        qo = np.exp(1j * k / (2.0 * z) * xo**2)
        out = spec * qo[None, :] * qo[:, None] * (np.exp(1j * k * z) / (1j * lam * z))
    if crop:
        out = _crop(out, n)
    return ComplexField(out, out_pitch, lam, field.origin)


def thin_lens_phase(r2: np.ndarray, k: float, f: float) -> np.ndarray:
    """Second-order thin-lens phase ``-k r^2 / (2 f)``."""
    return -k * r2 / (2.0 * f)


def spherical_lens_phase(r2: np.ndarray, k: float, n_index: float, radius: float) -> np.ndarray:
    """Exact single-surface thin-lens phase ``-k (n-1) R (1 - sqrt(1 - r^2/R^2))``.

    Valid for either sign of ``R``; requires ``r < |R|``.
    """
    ratio = r2 / radius**2
    if np.any(ratio >= 1.0):
        raise ValueError("lens aperture exceeds the surface radius")
    return -k * (n_index - 1.0) * radius * (1.0 - np.sqrt(1.0 - ratio))


def apply_thin_lens(
    field: ComplexField,
    f1: float,
    *,
    center=(0.0, 0.0),
    lens_model=None,
    transmittance: np.ndarray | None = None,
) -> ComplexField:
    """Multiply by a thin-lens phase.

    Parameters
    ----------
    field : ComplexField
    f1 : float
        Focal length (meters). ``inf`` returns the input unchanged.
    center : (float, float)
        Lens center; a nonzero value models a lateral decenter.
    lens_model : object with ``n`` and ``R``, optional
        If given, the exact spherical-surface phase replaces the quadratic.
    transmittance : ndarray, optional
        Extra real amplitude transmittance applied with the lens.
    """
    if f1 == 0:
        raise ValueError("focal length must be nonzero")
    if math.isinf(f1) and lens_model is None:
        return field if transmittance is None else field.replace(amplitude=field.amplitude * transmittance)
    X, Y = field.mesh()
    r2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    if lens_model is None:
        phase = thin_lens_phase(r2, field.k, f1)
    else:
        phase = spherical_lens_phase(r2, field.k, lens_model.n, lens_model.R)
    amp = field.amplitude * np.exp(1j * phase)
    if transmittance is not None:
        amp = amp * transmittance
    return field.replace(amplitude=amp)


def mapped_coordinates(X, Y, center=(0.0, 0.0), tilt=(0.0, 0.0)):
    """Element-local coordinates for a decentered, tilted thin element.

    A tilt ``tau`` about the y axis (``tilt[0]``) stretches the local x
    coordinate by ``1/cos(tau)``; ``tilt[1]`` does the same for y.
    """
    u = (np.asarray(X) - center[0]) / math.cos(tilt[0])
    v = (np.asarray(Y) - center[1]) / math.cos(tilt[1])
    return u, v


def tilt_phase(X, Y, k: float, center=(0.0, 0.0), tilt=(0.0, 0.0)):
    """First-order linear phase ``k sin(tau) x`` of a tilted element."""
    return k * (math.sin(tilt[0]) * (np.asarray(X) - center[0]) + math.sin(tilt[1]) * (np.asarray(Y) - center[1]))


def apply_phase_profile(
    field: ComplexField,
    profile: PhaseLike,
    mask: ApertureMask,
    *,
    tilt=(0.0, 0.0),
) -> ComplexField:
    """Apply a metasurface: multiply by ``P(x) exp(j phi(x; lambda0))``.

    The phase is the profile evaluated with its own design wavenumber
    ``k0``, for every field wavelength (the metasurface imparts the same
    phase map at all wavelengths). The profile is centered on the mask
    center, so decentering the mask moves both.
    """
    if mask.diameter > field.extent * (1 + 1e-12):
        raise ValueError("mask diameter exceeds the field extent")
    X, Y = field.mesh()
    u, v = mapped_coordinates(X, Y, mask.center, tilt)
    k0 = 2.0 * math.pi / profile.wavelength
    phase = profile.phase(u, v) + tilt_phase(X, Y, k0, mask.center, tilt)
    return field.replace(amplitude=field.amplitude * mask(X, Y) * np.exp(1j * phase))
