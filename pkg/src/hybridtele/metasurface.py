"""Metasurface phase profiles, nanocell LUT fitting and layout synthesis.

Phase profiles are radially symmetric and evaluated with the design
wavenumber ``k0 = 2 pi / lambda0``:

* ``quadratic``   ``phi = -k0 r^2 / (2 f)``
* ``hyperbolic``  ``phi = k0 (f - sgn(f) sqrt(r^2 + f^2))``
* ``spherical``   ``phi = k0 (sgn(f) sqrt(f^2 - r^2) - f)``
* ``polynomial``  ``phi = k0 * sum_i c_i r^(2i)``, i = 1..7

The ``sgn(f)`` factors make the three focal-length kinds agree to second
order for either sign of ``f``. Polynomial coefficients are stored in SI
units (``c_i`` in m^(1-2i)); :meth:`PhaseProfile.polynomial_mm` converts
coefficients quoted for radii in millimeters.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import UnknownRadiusError

KINDS = ("polynomial", "quadratic", "hyperbolic", "spherical")
TWO_PI = 2.0 * math.pi
LAYOUT_MAGIC = b"HTLAYOUT"
LAYOUT_HEADER = struct.Struct("<8sQd")
NO_PILLAR = 0xFFFF


@dataclass(frozen=True)
class PhaseProfile:
    """Radially symmetric metasurface phase profile.

    Parameters
    ----------
    kind : str
        One of ``polynomial``, ``quadratic``, ``hyperbolic``, ``spherical``.
    coefficients : tuple of float
        Polynomial coefficients ``c1..c7`` in SI units (polynomial kind).
    focal_length : float, optional
        Focal length in meters (other kinds).
    wavelength : float
        Design wavelength ``lambda0`` in meters.
    """

    kind: str
    coefficients: tuple[float, ...] = ()
    focal_length: float | None = None
    wavelength: float = 532e-9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if self.kind == "polynomial":
            if len(self.coefficients) > 7:
                raise ValueError("at most 7 polynomial coefficients (orders r^2..r^14)")
        elif self.focal_length is None or self.focal_length == 0 or not math.isfinite(self.focal_length):
            raise ValueError(f"{self.kind} profile needs a finite nonzero focal length")

    @classmethod
    def quadratic(cls, focal_length: float, wavelength: float = 532e-9) -> "PhaseProfile":
        return cls("quadratic", focal_length=focal_length, wavelength=wavelength)

    @classmethod
    def polynomial(cls, coefficients, wavelength: float = 532e-9) -> "PhaseProfile":
        return cls("polynomial", coefficients=tuple(coefficients), wavelength=wavelength)

    @classmethod
    def polynomial_mm(cls, coefficients_mm, wavelength: float = 532e-9) -> "PhaseProfile":
        """Build from coefficients quoted for radius in millimeters."""
        si = [c * 1e-3 ** (1 - 2 * (i + 1)) for i, c in enumerate(coefficients_mm)]
        return cls.polynomial(si, wavelength)

    @property
    def k0(self) -> float:
        return TWO_PI / self.wavelength

    def coefficients_mm(self) -> list[float]:
        return [c * 1e-3 ** (2 * (i + 1) - 1) for i, c in enumerate(self.coefficients)]

    def radial(self, r) -> np.ndarray:
        """Unwrapped phase (rad) at radius ``r`` (meters)."""
        r = np.asarray(r, dtype=np.float64)
        k0 = self.k0
        if self.kind == "polynomial":
            u = r * r
            acc = np.zeros_like(u)
            for c in reversed(self.coefficients):
                acc = (acc + c) * u
            return k0 * acc
        f = self.focal_length
        if self.kind == "quadratic":
            return -k0 * r * r / (2.0 * f)
        if self.kind == "hyperbolic":
            return k0 * (f - math.copysign(1.0, f) * np.sqrt(r * r + f * f))
        if np.any(r >= abs(f)):
            raise ValueError("spherical profile undefined for r >= |f|")
        return k0 * (math.copysign(1.0, f) * np.sqrt(f * f - r * r) - f)

    def radial_derivative(self, r) -> np.ndarray:
        """``d phi / d r`` in rad/m."""
        r = np.asarray(r, dtype=np.float64)
        k0 = self.k0
        if self.kind == "polynomial":
            u = r * r
            acc = np.zeros_like(u)
            for i in range(len(self.coefficients), 0, -1):
                acc = acc * u + 2 * i * self.coefficients[i - 1]
            return k0 * acc * r
        f = self.focal_length
        if self.kind == "quadratic":
            return -k0 * r / f
        sgn = math.copysign(1.0, f)
        if self.kind == "hyperbolic":
            return -k0 * sgn * r / np.sqrt(r * r + f * f)
        return -k0 * sgn * r / np.sqrt(f * f - r * r)

    def phase(self, x, y=0.0) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.radial(np.hypot(x, y))

    def gradient(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Transverse phase gradient (rad/m)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        r = np.hypot(x, y)
        d = self.radial_derivative(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(r > 0, d / np.where(r > 0, r, 1.0), 0.0)
        if self.kind in ("quadratic", "polynomial"):
            # d/dr is linear in r near the axis; use the limit there
            lim = -self.k0 / self.focal_length if self.kind == "quadratic" else 2.0 * self.k0 * (
                self.coefficients[0] if self.coefficients else 0.0)
            ratio = np.where(r > 0, ratio, lim)
        return ratio * x, ratio * y

    def paraxial_focal_length(self) -> float:
        if self.kind != "polynomial":
            return float(self.focal_length)
        c1 = self.coefficients[0] if self.coefficients else 0.0
        return math.inf if c1 == 0 else -1.0 / (2.0 * c1)

    def to_polynomial(self, order: int = 7) -> "PhaseProfile":
        """Polynomial with the same second-order term (exact for quadratic)."""
        if self.kind == "polynomial":
            c = list(self.coefficients) + [0.0] * (order - len(self.coefficients))
            return PhaseProfile.polynomial(c[:order], self.wavelength)
        if self.kind != "quadratic":
            raise ValueError("only quadratic profiles convert exactly")
        c = [-1.0 / (2.0 * self.focal_length)] + [0.0] * (order - 1)
        return PhaseProfile.polynomial(c, self.wavelength)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "coefficients": list(self.coefficients),
            "focal_length": self.focal_length,
            "wavelength": self.wavelength,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseProfile":
        return cls(d["kind"], tuple(d.get("coefficients", ())), d.get("focal_length"), d.get("wavelength", 532e-9))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def eval_phase(profile: PhaseProfile, x, y=0.0) -> np.ndarray:
    """Unwrapped phase of ``profile`` at lateral position ``(x, y)``."""
    return profile.phase(x, y)


@dataclass(frozen=True)
class QuadraticFit:
    """Least-squares quadratic fit ``phi ~ a + b r^2`` over a disk."""

    focal_length: float
    rms_residual: float
    piston: float


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(48)


def fit_quadratic(profile: PhaseProfile, aperture: float) -> QuadraticFit:
    """Fit piston plus quadratic phase over a disk of diameter ``aperture``.

    The fit is area-weighted. With ``u = r^2`` the disk measure is uniform in
    ``u``, so Gauss-Legendre quadrature in ``u`` integrates polynomial
    profiles exactly.

    Returns
    -------
    QuadraticFit
        ``focal_length = -k0 / (2 b)`` and the RMS residual phase (rad).
    """
    umax = (aperture / 2.0) ** 2
    u = 0.5 * umax * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS  # sums to 1: mean over the disk
    phi = profile.radial(np.sqrt(u))
    mu_u = np.sum(w * u)
    mu_p = np.sum(w * phi)
    b = np.sum(w * (u - mu_u) * (phi - mu_p)) / np.sum(w * (u - mu_u) ** 2)
    a = mu_p - b * mu_u
    resid = phi - (a + b * u)
    rms = float(np.sqrt(max(np.sum(w * resid**2), 0.0)))
    f = math.inf if b == 0 else -profile.k0 / (2.0 * b)
    return QuadraticFit(float(f), rms, float(a))


def effective_focal_length(profile: PhaseProfile, aperture: float) -> float:
    """Quadratic focal length used by the defocus and focal-plane formulas."""
    if profile.kind == "quadratic":
        return float(profile.focal_length)
    return fit_quadratic(profile, aperture).focal_length


def max_phase_gradient(profile: PhaseProfile, aperture: float, samples: int = 257) -> float:
    """Largest ``|d phi/d r|`` (rad/m) over the aperture."""
    r = np.linspace(0.0, aperture / 2.0, samples)
    return float(np.max(np.abs(profile.radial_derivative(r))))


def wrap_phase(phi) -> np.ndarray:
    """Wrap to [0, 2 pi)."""
    return np.mod(phi, TWO_PI)


def circular_distance(a, b) -> np.ndarray:
    """Angular distance on the circle, in [0, pi]."""
    return np.abs(np.mod(np.asarray(a) - np.asarray(b) + math.pi, TWO_PI) - math.pi)


@dataclass(frozen=True, eq=False)
class NanocellLut:
    """Nanopillar look-up table ``radius -> T exp(j phi)``.

    Entries are sorted by radius on construction, so the table is
    independent of input order.

    Parameters
    ----------
    radius_nm, transmittance, phase : array_like
        Per-entry pillar radius (nm), amplitude transmittance in [0, 1], and
        phase (rad).
    height_nm, pitch_nm : float
        Pillar height and nanocell pitch.
    material : str
    synthetic : bool
        Marks tables that are not simulation data.
    require_full_phase : bool
        Enforce that the tabulated phases span at least 2 pi.
    """

    radius_nm: np.ndarray
    transmittance: np.ndarray
    phase: np.ndarray
    height_nm: float = 775.0
    pitch_nm: float = 300.0
    material: str = "SiN"
    synthetic: bool = False
    require_full_phase: bool = field(default=True, repr=False)

    def __post_init__(self):
        r = np.asarray(self.radius_nm, dtype=np.float64)
        t = np.asarray(self.transmittance, dtype=np.float64)
        p = np.asarray(self.phase, dtype=np.float64)
        if not (r.ndim == 1 and r.shape == t.shape == p.shape and r.size > 0):
            raise ValueError("LUT columns must be non-empty 1-D arrays of equal length")
        order = np.argsort(r, kind="stable")
        r, t, p = r[order], t[order], p[order]
        if np.any(np.diff(r) <= 0):
            raise ValueError("LUT radii must be distinct")
        if r[0] < 50.0 - 1e-9 or r[-1] > 130.0 + 1e-9:
            raise ValueError("LUT radii must lie within [50, 130] nm")
        if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(p)):
            raise ValueError("LUT transmittance must be in [0, 1] and phases finite")
        if self.require_full_phase and np.ptp(p) < TWO_PI * (1 - 1e-9):
            raise ValueError(f"LUT phase span {np.ptp(p):.4f} rad is below 2 pi")
        for name, arr in (("radius_nm", r), ("transmittance", t), ("phase", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.radius_nm.size

    @classmethod
    def from_csv(cls, path, **kwargs) -> "NanocellLut":
        """Read ``radius_nm,transmittance,phase_rad`` CSV; ``#`` lines are comments."""
        text = Path(path).read_text(encoding="utf-8").splitlines()
        synthetic = any("synthetic" in line.lower() for line in text if line.startswith("#"))
        rows = list(csv.DictReader(line for line in text if line.strip() and not line.startswith("#")))
        if not rows or set(rows[0]) != {"radius_nm", "transmittance", "phase_rad"}:
            raise ValueError(f"{path}: expected header radius_nm,transmittance,phase_rad")
        r = [float(row["radius_nm"]) for row in rows]
        t = [float(row["transmittance"]) for row in rows]
        p = [float(row["phase_rad"]) for row in rows]
        kwargs.setdefault("synthetic", synthetic)
        return cls(np.array(r), np.array(t), np.array(p), **kwargs)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if self.synthetic:
                fh.write("# synthetic LUT (not simulation data)\n")
            w = csv.writer(fh)
            w.writerow(["radius_nm", "transmittance", "phase_rad"])
            for r, t, p in zip(self.radius_nm, self.transmittance, self.phase):
                w.writerow([repr(float(r)), repr(float(t)), repr(float(p))])
        return path

    @property
    def modulation(self) -> np.ndarray:
        return self.transmittance * np.exp(1j * self.phase)

    @cached_property
    def _circle(self):
        """Entries sorted by wrapped phase, duplicates collapsed to the smallest radius."""
        w = wrap_phase(self.phase)
        order = np.lexsort((self.radius_nm, w))
        ws, idx = w[order], order
        keep = np.concatenate(([True], np.diff(ws) > 0))
        return ws[keep], idx[keep]

    def max_gap(self) -> float:
        """Largest circular gap between adjacent wrapped entry phases."""
        ws, _ = self._circle
        gaps = np.diff(np.concatenate((ws, [ws[0] + TWO_PI])))
        return float(gaps.max())

    def index_of(self, radius_nm) -> np.ndarray:
        """Map radii to entry indices; raises for radii not in the table."""
        r = np.asarray(radius_nm, dtype=np.float64)
        idx = np.clip(np.searchsorted(self.radius_nm, r), 0, len(self) - 1)
        lower = np.clip(idx - 1, 0, len(self) - 1)
        pick = np.where(np.abs(self.radius_nm[lower] - r) < np.abs(self.radius_nm[idx] - r), lower, idx)
        bad = np.abs(self.radius_nm[pick] - r) > 1e-6
        if np.any(bad):
            raise UnknownRadiusError(f"radius {float(r[bad].ravel()[0]):.4f} nm is not in the LUT")
        return pick

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.radius_nm, self.transmittance, self.phase):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(json.dumps([self.height_nm, self.pitch_nm, self.material]).encode())
        return h.hexdigest()


_TIE_EPS = 1e-12


def lut_fit_index(target_phase, lut: NanocellLut) -> np.ndarray:
    """Entry index minimizing circular phase distance; ties go to the smaller radius."""
    t = wrap_phase(np.asarray(target_phase, dtype=np.float64))
    ws, idx = lut._circle
    m = ws.size
    pos = np.searchsorted(ws, t)
    i_hi = idx[pos % m]
    i_lo = idx[(pos - 1) % m]
    d_hi = circular_distance(t, lut.phase[i_hi])
    d_lo = circular_distance(t, lut.phase[i_lo])
    r_hi, r_lo = lut.radius_nm[i_hi], lut.radius_nm[i_lo]
    tie = np.abs(d_hi - d_lo) <= _TIE_EPS
    take_lo = np.where(tie, r_lo < r_hi, d_lo < d_hi)
    return np.where(take_lo, i_lo, i_hi)


def lut_fit(target_phase, lut: NanocellLut):
    """Pillar radius (nm) best matching ``target_phase`` on the phase circle.

    Works element-wise on arrays; a scalar input returns a float.
    """
    r = lut.radius_nm[lut_fit_index(target_phase, lut)]
    return float(r) if np.ndim(target_phase) == 0 else r


@dataclass(frozen=True, eq=False)
class MetasurfaceLayout:
    """Nanopillar radii on a square nanocell grid.

    ``radius_nm`` is ``NaN`` where no pillar is placed (outside the aperture).
    """

    radius_nm: np.ndarray
    pitch: float
    aperture: float
    profile: PhaseProfile
    lut_hash: str

    def __post_init__(self):
        a = np.array(self.radius_nm, dtype=np.float64, copy=True)
        a.setflags(write=False)
        object.__setattr__(self, "radius_nm", a)

    @property
    def m(self) -> int:
        return self.radius_nm.shape[0]

    @property
    def profile_hash(self) -> str:
        return self.profile.digest()

    @property
    def occupied(self) -> np.ndarray:
        return ~np.isnan(self.radius_nm)

    def cell_axis(self) -> np.ndarray:
        return cell_centers(self.m, self.pitch)

    def to_binary(self) -> bytes:
        q = np.full(self.radius_nm.shape, NO_PILLAR, dtype="<u2")
        occ = self.occupied
        q[occ] = np.rint(self.radius_nm[occ] * 10.0).astype("<u2")
        return LAYOUT_HEADER.pack(LAYOUT_MAGIC, self.m, self.pitch * 1e9) + q.tobytes()

    def write_binary(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_binary())
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        rows, cols = np.nonzero(self.occupied)
        vals = self.radius_nm[rows, cols]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("row,col,radius_nm\n")
            for r, c, v in zip(rows.tolist(), cols.tolist(), vals.tolist()):
                fh.write(f"{r},{c},{v:.1f}\n")
        return path

    def provenance(self) -> dict:
        return {
            "profile_hash": self.profile_hash,
            "lut_hash": self.lut_hash,
            "profile": self.profile.to_dict(),
            "pitch_nm": self.pitch * 1e9,
            "aperture_m": self.aperture,
            "cells_across": self.m,
        }


def read_layout_binary(path) -> tuple[np.ndarray, float]:
    """Return (radius grid in nm with NaN for no pillar, pitch in m)."""
    data = Path(path).read_bytes()
    magic, m, pitch_nm = LAYOUT_HEADER.unpack_from(data)
    if magic != LAYOUT_MAGIC:
        raise ValueError(f"{path}: not a layout file")
    q = np.frombuffer(data, dtype="<u2", offset=LAYOUT_HEADER.size).reshape(m, m)
    r = np.where(q == NO_PILLAR, np.nan, q / 10.0)
    return r, pitch_nm * 1e-9


def cell_centers(m: int, pitch: float) -> np.ndarray:
    return (np.arange(m) - (m - 1) / 2.0) * pitch


def synthesize_layout(
    profile: PhaseProfile,
    lut: NanocellLut,
    aperture: float,
    *,
    pitch: float | None = None,
    workers: int = 1,
    block: int = 256,
) -> MetasurfaceLayout:
    """Assign a LUT radius to every nanocell inside the aperture.

    Each in-aperture cell center gets ``lut_fit(wrap(phi(x)))``. Rows are
    processed in blocks; the result does not depend on ``workers``.
    """
    pitch = lut.pitch_nm * 1e-9 if pitch is None else pitch
    m = int(math.ceil(aperture / pitch - 1e-9))
    axis = cell_centers(m, pitch)
    out = np.full((m, m), np.nan)
    r_ap2 = (aperture / 2.0) ** 2

    def work(start: int) -> None:
        stop = min(start + block, m)
        Y = axis[start:stop, None]
        X = axis[None, :]
        inside = X**2 + Y**2 <= r_ap2
        phi = eval_phase(profile, np.broadcast_to(X, inside.shape)[inside], np.broadcast_to(Y, inside.shape)[inside])
        rows = np.full(inside.shape, np.nan)
        rows[inside] = lut.radius_nm[lut_fit_index(phi, lut)]
        out[start:stop] = rows

    starts = range(0, m, block)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(work, starts))
    else:
        for s in starts:
            work(s)
    return MetasurfaceLayout(out, pitch, aperture, profile, lut.digest())


@dataclass(frozen=True, eq=False)
class RealizedModulation:
    """Per-cell complex transmission of a synthesized layout.

    ``modulation`` is zero outside the aperture; ``phase_error`` is the
    wrapped difference between the realized and the ideal phase (NaN
    outside).
    """

    modulation: np.ndarray
    phase_error: np.ndarray
    pitch: float
    aperture: float

    @property
    def m(self) -> int:
        return self.modulation.shape[0]

    def sample(self, x, y) -> np.ndarray:
        """Nearest-cell lookup at element-local coordinates (meters)."""
        half = (self.m - 1) / 2.0
        ix = np.rint(np.asarray(x) / self.pitch + half).astype(np.int64)
        iy = np.rint(np.asarray(y) / self.pitch + half).astype(np.int64)
        ok = (ix >= 0) & (ix < self.m) & (iy >= 0) & (iy < self.m)
        vals = self.modulation[np.clip(iy, 0, self.m - 1), np.clip(ix, 0, self.m - 1)]
        return np.where(ok, vals, 0.0)

    def power_fraction(self) -> float:
        """Mean |C|^2 over in-aperture cells."""
        occ = ~np.isnan(self.phase_error)
        return float(np.mean(np.abs(self.modulation[occ]) ** 2))

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.modulation).view("<f8").tobytes()).hexdigest()


def layout_to_realized_modulation(layout: MetasurfaceLayout, lut: NanocellLut) -> RealizedModulation:
    """Rebuild ``T exp(j phi)`` per cell and the phase-error map.

    Raises
    ------
    UnknownRadiusError
        If a layout radius is not a LUT entry.
    """
    occ = layout.occupied
    idx = lut.index_of(layout.radius_nm[occ])
    mod = np.zeros(layout.radius_nm.shape, dtype=np.complex128)
    mod[occ] = lut.modulation[idx]
    axis = layout.cell_axis()
    X, Y = np.meshgrid(axis, axis, indexing="xy")
    ideal = eval_phase(layout.profile, X[occ], Y[occ])
    err = np.full(layout.radius_nm.shape, np.nan)
    err[occ] = np.mod(lut.phase[idx] - ideal + math.pi, TWO_PI) - math.pi
    return RealizedModulation(mod, err, layout.pitch, layout.aperture)


def default_lut() -> NanocellLut:
    """The packaged synthetic 81-entry LUT (50-130 nm radii, 1 nm steps)."""
    from importlib import resources

    with resources.as_file(resources.files("hybridtele.data").joinpath("nanocell_lut_synthetic.csv")) as p:
        return NanocellLut.from_csv(p)
