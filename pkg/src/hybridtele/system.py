"""Two-element hybrid telephoto: paraxial formulas, PSFs, MTF and spot diagrams.

Geometry: a thin objective of focal length ``f1`` (the first element), a
metasurface eyepiece a distance ``m`` behind it, and the sensor a distance
``s`` behind the eyepiece. The eyepiece aperture is the stop. Point
sources sit a distance ``z0`` in front of the objective at lateral
position ``x0``; a field angle ``theta`` means ``x0 = z0 tan(theta)``.

With the diverging-wave convention ``exp(+j k r^2 / 2z)`` the field just
before the eyepiece is ``exp(j k/2 (A2 |x|^2 - 2 B2 x0 . x))`` with

    A2 = 1/m - (1/m^2) / (1/m + 1/z0 - 1/f1)
    B2 = (1/(z0 m)) / (1/m + 1/z0 - 1/f1)

and the quadratic pupil coefficient at the sensor is
``Delta(lambda) = 1/s + A2 - (lambda/lambda0) / f2``. The paraxial image
of a point sits at ``gamma x0`` with ``gamma = -s B2``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import fileio
from .errors import AfocalError, DegenerateConjugateError, RayMissError, SamplingError
from .field import (
    ApertureMask,
    ComplexField,
    GridSpec,
    _crop,
    _pad,
    apply_phase_profile,
    apply_thin_lens,
    fresnel_propagate,
    mapped_coordinates,
    point_source_field,
    spherical_lens_phase,
    tilt_phase,
)
from .metasurface import PhaseProfile, RealizedModulation, effective_focal_length

DESIGN_MTF_THRESHOLD = 1e-3
REPORT_MTF_THRESHOLD = 0.2
_DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class LensModel:
    """Physical parameters behind a thin single-surface lens: ``f = R/(n-1)``."""

    n: float
    R: float

    def __post_init__(self):
        if self.n <= 1.0 or self.R == 0:
            raise ValueError("lens model needs n > 1 and R != 0")

    @property
    def focal_length(self) -> float:
        return self.R / (self.n - 1.0)

    @classmethod
    def matched(cls, focal_length: float, n: float = 1.5168) -> "LensModel":
        """Single-surface lens of the given power and index (BK7 by default)."""
        return cls(n, (n - 1.0) * focal_length)


@dataclass(frozen=True, eq=False)
class SystemGeometry:
    """Immutable description of the objective + metasurface system.

    Parameters
    ----------
    f1 : float
        Objective focal length (m), wavelength-independent.
    m_sep, s_sep : float
        Objective-to-eyepiece and eyepiece-to-sensor separations (m).
    profile : PhaseProfile
        Eyepiece phase profile.
    eyepiece_diameter : float
        Stop diameter at the eyepiece (m).
    objective_aperture : float
        Objective clear aperture (m); treated as unvignetted.
    lambda0 : float
        Design wavelength (m).
    lens_model : LensModel, optional
        Physical parameters of the objective; must satisfy ``f1 = R/(n-1)``.
    track_offset : float
        Fixed mechanical track beyond the thin-element separations, so
        ``TTL = m_sep + s_sep + track_offset``.
    pixel_pitch : float
        Sensor pixel pitch (m).
    eyepiece_decenter, objective_decenter : (float, float)
        Lateral element decenters (m).
    eyepiece_tilt, objective_tilt : (float, float)
        Element tilts (rad) about the y and x axes.
    refractive_eyepiece : LensModel, optional
        Replace the metasurface with a refractive lens of exact spherical
        sag (used for robustness comparisons).
    realized : RealizedModulation, optional
        As-fabricated nanocell modulation replacing the ideal profile.
    """

    f1: float
    m_sep: float
    s_sep: float
    profile: PhaseProfile
    eyepiece_diameter: float = 0.8e-3
    objective_aperture: float = 5e-3
    lambda0: float = 532e-9
    lens_model: LensModel | None = None
    track_offset: float = 0.0
    pixel_pitch: float = 2e-6
    eyepiece_decenter: tuple[float, float] = (0.0, 0.0)
    eyepiece_tilt: tuple[float, float] = (0.0, 0.0)
    objective_decenter: tuple[float, float] = (0.0, 0.0)
    objective_tilt: tuple[float, float] = (0.0, 0.0)
    refractive_eyepiece: LensModel | None = None
    realized: RealizedModulation | None = field(default=None, repr=False)
    name: str = "custom"

    def __post_init__(self):
        if not (self.f1 > 0 and self.m_sep > 0 and self.s_sep > 0):
            raise ValueError("f1, m_sep and s_sep must be positive")
        if self.eyepiece_diameter > self.objective_aperture:
            raise ValueError("eyepiece aperture cannot exceed the objective aperture")
        if self.lens_model is not None and not math.isclose(self.lens_model.focal_length, self.f1, rel_tol=1e-9):
            raise ValueError("lens_model inconsistent with f1 = R/(n-1)")
        for name in ("eyepiece_decenter", "eyepiece_tilt", "objective_decenter", "objective_tilt"):
            v = getattr(self, name)
            object.__setattr__(self, name, (float(v[0]), float(v[1])))

    def replace(self, **changes) -> "SystemGeometry":
        return dataclasses.replace(self, **changes)

    @property
    def eyepiece_mask(self) -> ApertureMask:
        return ApertureMask(self.eyepiece_diameter, self.eyepiece_decenter)

    @property
    def ttl(self) -> float:
        return self.m_sep + self.s_sep + self.track_offset

    @cached_property
    def f2(self) -> float:
        """Effective quadratic focal length of the eyepiece at ``lambda0``."""
        if self.refractive_eyepiece is not None:
            return self.refractive_eyepiece.focal_length
        return effective_focal_length(self.profile, self.eyepiece_diameter)

    @property
    def is_metasurface(self) -> bool:
        return self.refractive_eyepiece is None

    def power_scale(self, wavelength: float) -> float:
        """Eyepiece power at ``wavelength`` relative to ``lambda0``.

        A wavelength-independent phase map has power proportional to
        ``lambda``; the refractive comparison lens is dispersion-free.
        """
        return wavelength / self.lambda0 if self.is_metasurface else 1.0

    @property
    def efl(self) -> float:
        if self.f1 == self.m_sep:
            raise AfocalError("f1 equals m_sep: EFL undefined")
        return self.s_sep * self.f1 / (self.f1 - self.m_sep)

    @property
    def telephoto_ratio(self) -> float:
        return self.ttl / self.efl

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "f1": self.f1,
            "m_sep": self.m_sep,
            "s_sep": self.s_sep,
            "profile": self.profile.to_dict(),
            "eyepiece_diameter": self.eyepiece_diameter,
            "objective_aperture": self.objective_aperture,
            "lambda0": self.lambda0,
            "lens_model": None if self.lens_model is None else dataclasses.asdict(self.lens_model),
            "track_offset": self.track_offset,
            "pixel_pitch": self.pixel_pitch,
            "eyepiece_decenter": list(self.eyepiece_decenter),
            "eyepiece_tilt": list(self.eyepiece_tilt),
            "objective_decenter": list(self.objective_decenter),
            "objective_tilt": list(self.objective_tilt),
            "refractive_eyepiece": None
            if self.refractive_eyepiece is None
            else dataclasses.asdict(self.refractive_eyepiece),
        }
        if self.realized is not None:
            d["realized_hash"] = self.realized.digest()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemGeometry":
        kw = dict(d)
        kw.pop("realized_hash", None)
        kw["profile"] = PhaseProfile.from_dict(kw["profile"])
        for key in ("lens_model", "refractive_eyepiece"):
            if kw.get(key) is not None:
                kw[key] = LensModel(**kw[key])
        for key in ("eyepiece_decenter", "eyepiece_tilt", "objective_decenter", "objective_tilt"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class ParaxialCoefficients:
    """Quadratic and linear coefficients of the field at the eyepiece.

    ``lateral_gain`` is ``B2 * z0``, finite in the infinite-conjugate limit;
    ``B2 * x0 = lateral_gain * (x0 / z0)``.
    """

    A2: float
    B2: float
    z0: float
    lateral_gain: float


def _inverse_distance(z0: float) -> float:
    return 0.0 if math.isinf(z0) else 1.0 / z0


def _axis_coefficients(f1: float, m: float, z0: float) -> tuple[float, float]:
    """(A2, lateral gain) for one transverse axis."""
    inv = 1.0 / m + _inverse_distance(z0) - 1.0 / f1
    if abs(inv) <= _DEGENERATE_TOL * (1.0 / m):
        raise DegenerateConjugateError(
            "source is imaged onto the eyepiece plane (1/m + 1/z0 - 1/f1 = 0); "
            "the second-order field expansion is singular"
        )
    return 1.0 / m - 1.0 / (m * m * inv), 1.0 / (m * inv)


def paraxial_coefficients(geom: SystemGeometry, z0: float) -> ParaxialCoefficients:
    """Closed-form ``A2`` and ``B2`` for a source at distance ``z0``.

    ``z0 = numpy.inf`` selects the infinite conjugate.
    """
    if z0 == 0:
        raise DegenerateConjugateError("z0 = 0 is not a valid conjugate")
    a2, gain = _axis_coefficients(geom.f1, geom.m_sep, z0)
    b2 = 0.0 if math.isinf(z0) else gain / z0
    return ParaxialCoefficients(a2, b2, z0, gain)


def residual_defocus(geom: SystemGeometry, z0: float, wavelength: float) -> float:
    """Quadratic pupil-phase coefficient ``Delta`` (1/m) at the sensor."""
    a2 = paraxial_coefficients(geom, z0).A2
    return 1.0 / geom.s_sep + a2 - geom.power_scale(wavelength) / geom.f2


def focal_plane(geom: SystemGeometry, wavelength: float) -> float:
    """Object distance imaged sharply onto the sensor at ``wavelength``.

    Returns ``inf`` when the in-focus object is at infinity and a negative
    value for a virtual object.

    Raises
    ------
    AfocalError
        When ``R = 1/s + 1/m - (lambda/lambda0)/f2`` vanishes.
    """
    m = geom.m_sep
    big_r = 1.0 / geom.s_sep + 1.0 / m - geom.power_scale(wavelength) / geom.f2
    if abs(big_r) <= 1e-12 / m:
        raise AfocalError("R(lambda) = 0: no object plane is focused (afocal configuration)")
    den = 1.0 / (m * m * big_r) - 1.0 / m + 1.0 / geom.f1
    if den == 0:
        return math.inf
    return 1.0 / den


@dataclass(frozen=True)
class Magnification:
    gamma: float
    efl: float
    telephoto_ratio: float


def magnification_and_efl(geom: SystemGeometry, z0: float) -> Magnification:
    """Lateral magnification ``gamma = -s B2``, EFL and telephoto ratio."""
    coeffs = paraxial_coefficients(geom, z0)
    gamma = -geom.s_sep * coeffs.B2
    return Magnification(gamma, geom.efl, geom.telephoto_ratio)


@dataclass(frozen=True, eq=False)
class PsfSample:
    """Sensor-plane intensity for one point source.

    ``intensity`` is scaled so that ``intensity.sum() * pitch**2`` equals the
    fraction of the power incident on the stop that is transmitted (1 for a
    clear pupil). ``origin`` is the sensor coordinate of the grid center.
    """

    intensity: np.ndarray
    pitch: float
    wavelength: float
    field_point: tuple
    strehl: float
    centroid: tuple[float, float]
    origin: tuple[float, float]
    field_angle_deg: float
    method: str

    @property
    def n(self) -> int:
        return self.intensity.shape[0]

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        base = (np.arange(self.n) - self.n // 2) * self.pitch
        return base + self.origin[0], base + self.origin[1]

    @property
    def power(self) -> float:
        return float(self.intensity.sum() * self.pitch**2)

    def second_moment_radius(self) -> float:
        """RMS radius of the intensity about its centroid (m)."""
        x, y = self.axes()
        w = self.intensity / self.intensity.sum()
        r2 = (x[None, :] - self.centroid[0]) ** 2 + (y[:, None] - self.centroid[1]) ** 2
        return float(np.sqrt(np.sum(w * r2)))


def _lateral_slope(z0: float, x0, field_angle) -> tuple[tuple[float, float], tuple[float, float], float]:
    """Return (x0, u = x0/z0, field angle deg) from either description."""
    if field_angle is not None:
        th = field_angle if isinstance(field_angle, (tuple, list)) else (field_angle, 0.0)
        u = (math.tan(math.radians(th[0])), math.tan(math.radians(th[1])))
        x0 = (math.inf, math.inf) if math.isinf(z0) else (z0 * u[0], z0 * u[1])
        if math.isinf(z0) and u == (0.0, 0.0):
            x0 = (0.0, 0.0)
        return x0, u, math.degrees(math.atan(math.hypot(*u)))
    x0 = (float(x0[0]), float(x0[1]))
    if math.isinf(z0):
        if x0 != (0.0, 0.0):
            raise ValueError("finite x0 at infinite z0: give a field angle instead")
        return x0, (0.0, 0.0), 0.0
    u = (x0[0] / z0, x0[1] / z0)
    return x0, u, math.degrees(math.atan(math.hypot(*u)))


def _objective_terms(geom: SystemGeometry, z0: float, u):
    """Per-axis (A2, tilt b = B2*x0) including objective decenter and tilt.

    A decentered thin lens adds a linear phase ``k c . x / f1``, which acts
    like a change of source slope ``u -> u - c/f1``. A tilt stretches the
    lens coordinate by ``1/cos(tau)`` (focal length ``f1 cos^2 tau`` on that
    axis) and adds a linear phase ``k sin(tau) x``.
    """
    out = []
    for axis in (0, 1):
        tau = geom.objective_tilt[axis]
        f_axis = geom.f1 * math.cos(tau) ** 2
        a2, gain = _axis_coefficients(f_axis, geom.m_sep, z0)
        u_eff = u[axis] - geom.objective_decenter[axis] / geom.f1 - math.sin(tau)
        out.append((a2, gain * u_eff))
    return out


def eyepiece_transmission(geom: SystemGeometry, X, Y, wavelength: float):
    """Complex transmission of the eyepiece (mask included) on a grid.

    Returns ``(transmission, smooth_phase)`` where ``smooth_phase`` is the
    unwrapped phase used for sampling checks (``None`` for realized
    layouts).
    """
    c, tau = geom.eyepiece_decenter, geom.eyepiece_tilt
    mask = geom.eyepiece_mask(X, Y)
    u, v = mapped_coordinates(X, Y, c, tau)
    if geom.realized is not None:
        k0 = 2.0 * math.pi / geom.lambda0
        t = geom.realized.sample(u, v) * np.exp(1j * tilt_phase(X, Y, k0, c, tau)) * mask
        return t, None
    if geom.refractive_eyepiece is not None:
        k = 2.0 * math.pi / wavelength
        lens = geom.refractive_eyepiece
        phase = spherical_lens_phase(np.where(mask > 0, u * u + v * v, 0.0), k, lens.n, lens.R)
        phase = phase + tilt_phase(X, Y, k, c, tau)
    else:
        k0 = 2.0 * math.pi / geom.lambda0
        phase = geom.profile.phase(np.where(mask > 0, u, 0.0), np.where(mask > 0, v, 0.0))
        phase = phase + tilt_phase(X, Y, k0, c, tau)
    return mask * np.exp(1j * phase), phase


def _check_pupil_phase(phase: np.ndarray, mask: np.ndarray, n: int) -> None:
    inside = mask > 0
    dx = np.abs(np.diff(phase, axis=1))[inside[:, 1:] & inside[:, :-1]]
    dy = np.abs(np.diff(phase, axis=0))[inside[1:, :] & inside[:-1, :]]
    worst = max(dx.max(initial=0.0), dy.max(initial=0.0))
    if worst > math.pi:
        need = int(math.ceil(n * worst / math.pi))
        need += need % 2
        raise SamplingError(
            f"pupil phase changes by {worst:.3f} rad between samples (> pi); the PSF would alias. "
            f"Need N >= {need} at this sensor pitch",
            criterion="pupil phase sampling (|dW| <= pi per sample)",
            n_required=need,
        )


def _bbox(a: np.ndarray) -> tuple[slice, slice]:
    rows = np.nonzero(np.any(a != 0, axis=1))[0]
    cols = np.nonzero(np.any(a != 0, axis=0))[0]
    if rows.size == 0:
        return slice(0, 0), slice(0, 0)
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def _strehl_from_pupil(g: np.ndarray, sigma: np.ndarray, lam_s: float, guess, dx: float) -> float:
    """Peak of ``|sum g exp(-j 2 pi x.sigma / (lambda s))|^2`` over the reference.

    The peak is refined below the sample pitch with two rounds of a
    zoomed direct DFT around ``guess``; the reference is the same pupil
    with its phase removed.
    """
    rs, cs = _bbox(g)
    sub = g[rs, cs]
    sy, sx = sigma[rs], sigma[cs]
    ref = np.abs(sub).sum() ** 2
    if ref == 0:
        return 0.0
    cx, cy = guess
    best = 0.0
    for span in (dx, dx / 8.0, dx / 64.0):
        off = np.linspace(-span, span, 17)
        ex = np.exp(-2j * math.pi * np.outer(cx + off, sx) / lam_s)
        ey = np.exp(-2j * math.pi * np.outer(cy + off, sy) / lam_s)
        vals = np.abs(ey @ sub @ ex.T) ** 2
        iy, ix = np.unravel_index(np.argmax(vals), vals.shape)
        if vals[iy, ix] >= best:
            best = vals[iy, ix]
            cx, cy = cx + off[ix], cy + off[iy]
    return float(min(best / ref, 1.0))


def _psf_from_pupil(g, dsig, lam, s, area, n_out, origin, with_strehl):
    n = g.shape[0]
    lam_s = lam * s
    dx = lam_s / (n * dsig)
    spec = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(g))) * (dsig * dsig / lam_s)
    inten = np.abs(spec) ** 2 / area
    strehl = math.nan
    if with_strehl:
        iy, ix = np.unravel_index(np.argmax(inten), inten.shape)
        guess = ((ix - n // 2) * dx, (iy - n // 2) * dx)
        sigma = (np.arange(n) - n // 2) * dsig
        strehl = _strehl_from_pupil(g, sigma, lam_s, guess, dx)
    inten = _crop(inten, n_out)
    return inten, dx, strehl


def default_sensor_pitch(geom: SystemGeometry, wavelength: float) -> float:
    """Pitch placing the OTF cutoff at 80 % of Nyquist (pupil spans 0.4 N)."""
    return 0.4 * wavelength * geom.s_sep / geom.eyepiece_diameter


def psf(
    geom: SystemGeometry,
    z0: float,
    wavelength: float,
    x0=(0.0, 0.0),
    *,
    field_angle=None,
    n: int = 1024,
    pitch: float | None = None,
    method: str = "pupil",
    centered: bool = True,
    with_strehl: bool = True,
    crop: int | None = None,
    chain_n: int = 2048,
) -> PsfSample:
    """Point spread function at the sensor.

    Parameters
    ----------
    geom : SystemGeometry
    z0 : float
        Source distance (m); ``inf`` for a distant source given by angle.
    wavelength : float
    x0 : (float, float)
        Lateral source position (m). Ignored when ``field_angle`` is given.
    field_angle : float or (float, float), optional
        Field angle in degrees; the source sits at ``z0 tan(theta)``.
    n : int
        FFT size of the pupil integral.
    pitch : float, optional
        Sensor sample pitch; defaults to :func:`default_sensor_pitch`.
    method : {"pupil", "chain"}
        ``"pupil"`` evaluates the closed-form pupil integral with the
        analytic eyepiece-plane field; ``"chain"`` propagates the field from
        the objective numerically (point source, thin lens, Fresnel over
        ``m``, eyepiece, Fresnel over ``s``).
    centered : bool
        Center the output grid on the paraxial image point ``gamma x0``
        (pupil method only); otherwise the grid is centered on the axis.
    crop : int, optional
        Return only the central ``crop`` samples.

    Returns
    -------
    PsfSample
    """
    x0, u, angle = _lateral_slope(z0, x0, field_angle)
    s = geom.s_sep
    area = geom.eyepiece_mask.area
    if method == "chain":
        return _psf_chain(geom, z0, wavelength, x0, u, angle, chain_n, crop or n, with_strehl)
    if method != "pupil":
        raise ValueError(f"unknown PSF method {method!r}")
    dx = default_sensor_pitch(geom, wavelength) if pitch is None else pitch
    dsig = wavelength * s / (n * dx)
    span = geom.eyepiece_diameter + 2 * max(abs(c) for c in geom.eyepiece_decenter)
    if span / dsig > n / 2:
        raise SamplingError(
            f"sensor pitch {dx * 1e6:.3f} um too coarse: the pupil spans {span / dsig:.0f} of {n} "
            f"samples (> N/2) and the OTF would alias; use pitch <= {wavelength * s / (2 * span) * 1e6:.3f} um",
            criterion="pupil support <= N/2 (alias-free OTF)",
            n_required=None,
        )
    (a2x, bx), (a2y, by) = _objective_terms(geom, z0, u)
    center = (-s * bx, -s * by)
    sig = (np.arange(n) - n // 2) * dsig
    X, Y = np.meshgrid(sig, sig, indexing="xy")
    trans, smooth = eyepiece_transmission(geom, X, Y, wavelength)
    k = 2.0 * math.pi / wavelength
    w = 0.5 * k * ((1.0 / s + a2x) * X**2 + (1.0 / s + a2y) * Y**2)
    if not centered:
        w = w - k * (bx * X + by * Y)
    if smooth is not None:
        _check_pupil_phase(w + smooth, geom.eyepiece_mask(X, Y), n)
    g = trans * np.exp(1j * w)
    origin = center if centered else (0.0, 0.0)
    inten, dx_out, strehl = _psf_from_pupil(g, dsig, wavelength, s, area, crop or n, origin, with_strehl)
    return _finish(inten, dx_out, wavelength, x0, z0, strehl, origin, angle, "pupil")


def _finish(inten, dx, lam, x0, z0, strehl, origin, angle, method) -> PsfSample:
    inten = np.maximum(inten, 0.0)
    inten.setflags(write=False)
    nn = inten.shape[0]
    base = (np.arange(nn) - nn // 2) * dx
    tot = inten.sum()
    cx = origin[0] + float(np.sum(inten.sum(axis=0) * base) / tot) if tot > 0 else origin[0]
    cy = origin[1] + float(np.sum(inten.sum(axis=1) * base) / tot) if tot > 0 else origin[1]
    return PsfSample(inten, dx, lam, (tuple(x0), z0), strehl, (cx, cy), tuple(origin), angle, method)


def _soft_disk(r, r_full, r_zero):
    t = np.clip((r - r_full) / (r_zero - r_full), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(math.pi * t))


def _psf_chain(geom, z0, lam, x0, u, angle, n_obj, n_out, with_strehl) -> PsfSample:
    """End-to-end field chain through field-core operations."""
    if geom.objective_tilt != (0.0, 0.0):
        raise ValueError("the field chain does not model objective tilt")
    m, s, f1 = geom.m_sep, geom.s_sep, geom.f1
    inv_z = _inverse_distance(z0)
    curv1 = inv_z - 1.0 / f1
    gain = 1.0 + m * curv1
    if abs(gain) < 1e-9:
        raise DegenerateConjugateError("source imaged onto the eyepiece plane")
    u_eff = (u[0] - geom.objective_decenter[0] / f1, u[1] - geom.objective_decenter[1] / f1)
    # objective-plane footprint of the stop, with a soft taper just outside it
    half = geom.eyepiece_diameter / 2.0
    r_full, r_zero = 1.1 * half / abs(gain), 1.2 * half / abs(gain)
    hc = (m * u_eff[0] / gain, m * u_eff[1] / gain)
    reach = max(abs(hc[0]), abs(hc[1])) + r_zero
    d1 = 2.2 * reach / n_obj
    grid = GridSpec(n_obj, d1)
    if math.isinf(z0):
        field0 = point_source_field((0.0, 0.0), math.inf, lam, grid)
        X, Y = field0.mesh()
        k = 2.0 * math.pi / lam
        field0 = field0.replace(amplitude=field0.amplitude * np.exp(-1j * k * (u[0] * X + u[1] * Y)))
    else:
        field0 = point_source_field(x0, z0, lam, grid, check=False)
        X, Y = field0.mesh()
    taper = _soft_disk(np.hypot(X - hc[0], Y - hc[1]), r_full, r_zero)
    field1 = apply_thin_lens(field0, f1, center=geom.objective_decenter, transmittance=taper)
    field2 = fresnel_propagate(field1, m, method="impulse", pad=1, input_curvature=curv1)
    X2, Y2 = field2.mesh()
    mask = geom.eyepiece_mask(X2, Y2)
    incident = float(np.mean(np.abs(field2.amplitude[mask > 0]) ** 2))
    if geom.realized is None and geom.refractive_eyepiece is None:
        field3 = apply_phase_profile(field2, geom.profile, geom.eyepiece_mask, tilt=geom.eyepiece_tilt)
    else:
        trans, _ = eyepiece_transmission(geom, X2, Y2, lam)
        field3 = field2.replace(amplitude=field2.amplitude * trans)
    a2 = paraxial_coefficients(geom, z0).A2
    curv3 = a2 - geom.power_scale(lam) / geom.f2
    field4 = fresnel_propagate(field3, s, method="impulse", pad=2, crop=False, input_curvature=curv3)
    area = geom.eyepiece_mask.area
    inten = np.abs(field4.amplitude) ** 2 / (incident * area)
    strehl = math.nan
    if with_strehl:
        g = _pad(field3.amplitude / math.sqrt(incident), 2 * n_obj)
        dsig = field2.pitch
        iy, ix = np.unravel_index(np.argmax(inten), inten.shape)
        nn = inten.shape[0]
        guess = ((ix - nn // 2) * field4.pitch, (iy - nn // 2) * field4.pitch)
        # remove the sensor-plane chirp so the pupil sum matches the far-field form
        sig = (np.arange(2 * n_obj) - n_obj) * dsig
        chirp = np.exp(1j * math.pi / (lam * s) * sig**2)
        strehl = _strehl_from_pupil(g * chirp[None, :] * chirp[:, None], sig, lam * s, guess, field4.pitch)
    return _finish(_crop(inten, n_out), field4.pitch, lam, x0, z0, strehl, (0.0, 0.0), angle, "chain")


def psf_batch(geom: SystemGeometry, requests: list[dict], workers: int = 1, **kwargs) -> list[PsfSample]:
    """Evaluate many PSFs; output order follows ``requests``.

    Each request is a dict of :func:`psf` keyword arguments
    (``z0``, ``wavelength``, and ``x0`` or ``field_angle``).
    """

    def one(req):
        req = dict(req)
        return psf(geom, req.pop("z0"), req.pop("wavelength"), **{**kwargs, **req})

    if workers <= 1:
        return [one(r) for r in requests]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, requests))


@dataclass(frozen=True)
class MtfCurve:
    """Radially averaged MTF with threshold cutoffs (frequencies in lp/mm)."""

    frequency_lpmm: np.ndarray
    mtf: np.ndarray
    cutoff_design_lpmm: float
    cutoff_02_lpmm: float
    design_threshold: float

    def cutoff(self, threshold: float) -> float:
        return _crossing(self.frequency_lpmm, self.mtf, threshold)

    def at(self, freq_lpmm) -> np.ndarray:
        return np.interp(freq_lpmm, self.frequency_lpmm, self.mtf)


def _crossing(freq, curve, threshold) -> float:
    below = np.nonzero(curve < threshold)[0]
    if below.size == 0:
        return float(freq[-1])
    i = below[0]
    if i == 0:
        return float(freq[0])
    f0, f1_ = freq[i - 1], freq[i]
    c0, c1 = curve[i - 1], curve[i]
    return float(f0 + (c0 - threshold) * (f1_ - f0) / (c0 - c1))


def radial_average(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Average an FFT-ordered square array over integer-radius annuli."""
    n = values.shape[0]
    kk = np.fft.fftfreq(n) * n
    r = np.rint(np.hypot(kk[None, :], kk[:, None])).astype(np.int64)
    counts = np.bincount(r.ravel())
    sums = np.bincount(r.ravel(), weights=values.ravel())
    keep = np.arange(n // 2 + 1)
    return keep, sums[keep] / counts[keep]


def mtf(psf_sample: PsfSample, design_threshold: float = DESIGN_MTF_THRESHOLD) -> MtfCurve:
    """Radially averaged modulus of the normalized OTF."""
    otf = np.fft.fft2(psf_sample.intensity)
    otf = otf / otf[0, 0]
    radii, curve = radial_average(np.abs(otf))
    freq = radii / (psf_sample.n * psf_sample.pitch) * 1e-3
    return MtfCurve(
        freq,
        curve,
        _crossing(freq, curve, design_threshold),
        _crossing(freq, curve, REPORT_MTF_THRESHOLD),
        design_threshold,
    )


def diffraction_limited_mtf(freq_lpmm, geom: SystemGeometry, wavelength: float) -> np.ndarray:
    """Incoherent circular-pupil MTF with cutoff ``D / (lambda s)``."""
    nu_c = geom.eyepiece_diameter / (wavelength * geom.s_sep) * 1e-3
    v = np.clip(np.asarray(freq_lpmm, dtype=np.float64) / nu_c, 0.0, 1.0)
    return 2.0 / math.pi * (np.arccos(v) - v * np.sqrt(1.0 - v * v))


@dataclass(frozen=True)
class SpotDiagram:
    x: np.ndarray
    y: np.ndarray
    rms: float
    centroid: tuple[float, float]
    field_angle_deg: float
    wavelength: float


def stop_samples(n_rays: int, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic uniform disk sampling (sunflower pattern)."""
    i = np.arange(n_rays)
    r = radius * np.sqrt((i + 0.5) / n_rays)
    a = i * math.pi * (3.0 - math.sqrt(5.0))
    return r * np.cos(a), r * np.sin(a)


def spot_trace(
    geom: SystemGeometry,
    field_angle: float,
    n_rays: int = 4096,
    *,
    wavelength: float | None = None,
    z0: float = math.inf,
    pupil_fraction: float = 1.0,
) -> SpotDiagram:
    """Geometric spot diagram for a field angle (degrees).

    Rays fill the stop uniformly. The objective adds the paraxial slope
    ``-(x - c)/f1``; after propagation over ``m`` the eyepiece acts as a
    local grating changing the transverse direction cosines by
    ``grad(Phi) / k`` (``(lambda / 2 pi) grad(phi)`` for the metasurface).
    The ray then travels ``s`` to the sensor. Reported RMS is about the
    centroid.

    Raises
    ------
    RayMissError
        If a ray becomes evanescent after the eyepiece.
    """
    if n_rays < 10:
        raise ValueError("need at least 10 rays")
    lam = geom.lambda0 if wavelength is None else wavelength
    m, s, f1 = geom.m_sep, geom.s_sep, geom.f1
    c = geom.eyepiece_decenter
    ex, ey = stop_samples(n_rays, pupil_fraction * geom.eyepiece_diameter / 2.0)
    ex, ey = ex + c[0], ey + c[1]
    t = math.tan(math.radians(field_angle))
    co = geom.objective_decenter
    inv_z = _inverse_distance(z0)
    g = 1.0 + m * inv_z - m / f1
    # the source slope through the objective center is -tan(theta)
    ox = (ex + m * t - m * co[0] / f1) / g
    oy = (ey - m * co[1] / f1) / g
    ux = (ox * inv_z - t) - (ox - co[0]) / f1
    uy = oy * inv_z - (oy - co[1]) / f1
    nrm = np.sqrt(1.0 + ux**2 + uy**2)
    lx, ly = ux / nrm, uy / nrm
    u_loc, v_loc = mapped_coordinates(ex, ey, c, geom.eyepiece_tilt)
    if geom.refractive_eyepiece is not None:
        lens = geom.refractive_eyepiece
        r2 = u_loc**2 + v_loc**2
        dsag = 1.0 / np.sqrt(1.0 - r2 / lens.R**2)
        dlx = -(lens.n - 1.0) * u_loc * dsag / math.cos(geom.eyepiece_tilt[0])
        dly = -(lens.n - 1.0) * v_loc * dsag / math.cos(geom.eyepiece_tilt[1])
        dlx = dlx + math.sin(geom.eyepiece_tilt[0])
        dly = dly + math.sin(geom.eyepiece_tilt[1])
    else:
        gx, gy = geom.profile.gradient(u_loc, v_loc)
        scale = lam / (2.0 * math.pi)
        dlx = scale * (gx / math.cos(geom.eyepiece_tilt[0]) + geom.profile.k0 * math.sin(geom.eyepiece_tilt[0]))
        dly = scale * (gy / math.cos(geom.eyepiece_tilt[1]) + geom.profile.k0 * math.sin(geom.eyepiece_tilt[1]))
    lx2, ly2 = lx + dlx, ly + dly
    lz2 = 1.0 - lx2**2 - ly2**2
    if np.any(lz2 <= 0):
        raise RayMissError("a ray is evanescent after the eyepiece")
    lz2 = np.sqrt(lz2)
    xs = ex + s * lx2 / lz2
    ys = ey + s * ly2 / lz2
    cx, cy = float(xs.mean()), float(ys.mean())
    rms = float(np.sqrt(np.mean((xs - cx) ** 2 + (ys - cy) ** 2)))
    return SpotDiagram(xs, ys, rms, (cx, cy), float(field_angle), lam)


def write_psf_stack(directory, psfs: list[PsfSample]) -> Path:
    """Write PSFs as PFM files plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, p in enumerate(psfs):
        name = f"psf_{i:03d}.pfm"
        fileio.write_pfm(directory / name, p.intensity)
        index.append(
            {
                "file": name,
                "wavelength_nm": p.wavelength * 1e9,
                "field_angle_deg": p.field_angle_deg,
                "z0_m": p.field_point[1],
                "pitch_nm": p.pitch * 1e9,
                "strehl": p.strehl,
                "centroid_um": [p.centroid[0] * 1e6, p.centroid[1] * 1e6],
                "origin_um": [p.origin[0] * 1e6, p.origin[1] * 1e6],
                "method": p.method,
            }
        )
    fileio.write_json(directory / "index.json", {"psfs": index})
    return directory


def write_mtf_csv(path, curve: MtfCurve) -> Path:
    return fileio.write_csv(path, ["frequency_lpmm", "mtf"], [curve.frequency_lpmm, curve.mtf])


def write_spot_csv(path, spot: SpotDiagram) -> Path:
    return fileio.write_csv(path, ["x_um", "y_um"], [spot.x * 1e6, spot.y * 1e6])
