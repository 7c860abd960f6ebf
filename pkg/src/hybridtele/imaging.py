"""Two-shot measurement rendering, paired datasets and RAPSD analysis.

A planar display at depth ``z`` shows a linear-RGB texture. Each display
pixel emits a spectrum ``E(lambda) = sum_b rgb_b B_b(lambda)`` built from
three display primaries. The sensor image of channel ``c`` is

    I_c = sum_q S_c(lambda_q) dlambda  sum_b  (rgb_b * B_b(lambda_q) PSF_q)

with the texture magnified by ``gamma`` onto the sensor, followed by
Poisson photon noise, gain and Gaussian read noise. Per-wavelength sums
are folded into one effective kernel per (channel, primary) pair before
convolving.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import cv2
import numpy as np
from scipy import signal, special, stats

from . import fileio
from .errors import SamplingError, UnfocusedGeometryError
from .system import SystemGeometry, magnification_and_efl, psf, residual_defocus

COLOR_WAVELENGTHS_NM = np.arange(400.0, 701.0, 10.0)
STRUCTURE_OFFSETS_NM = np.array([-10.0, -5.0, 0.0, 5.0, 10.0])
PSF_PITCH = 1e-6
PSF_N = 1024
FOCUS_TOLERANCE_RAD = 0.1


def _read_curves(name: str) -> tuple[np.ndarray, np.ndarray]:
    with resources.files("hybridtele.data").joinpath(name).open("r") as fh:
        data = np.loadtxt(fh, delimiter=",", skiprows=1)
    return data[:, 0], data[:, 1:].T


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Three display primaries ``B_b(lambda)``, each with unit integral (1/nm)."""

    wavelengths_nm: np.ndarray
    primaries: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.primaries, dtype=np.float64)
        if p.shape != (3, len(self.wavelengths_nm)) or np.any(p < 0):
            raise ValueError("primaries must be a non-negative 3 x L array")
        area = np.trapezoid(p, self.wavelengths_nm, axis=1)
        object.__setattr__(self, "primaries", p / area[:, None])

    @classmethod
    def default(cls) -> "SpectralBasis":
        wl, curves = _read_curves("display_primaries.csv")
        return cls(wl, curves)

    def __call__(self, wavelength_nm) -> np.ndarray:
        """Primary values at the given wavelengths, shape ``(3, Q)``."""
        wl = np.atleast_1d(np.asarray(wavelength_nm, dtype=np.float64))
        return np.stack([np.interp(wl, self.wavelengths_nm, p, left=0.0, right=0.0) for p in self.primaries])

    def spectrum(self, rgb, wavelength_nm) -> np.ndarray:
        return np.asarray(rgb, dtype=np.float64) @ self(wavelength_nm)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Planar texture on a display.

    Parameters
    ----------
    texture : ndarray
        ``H x W x 3`` linear RGB radiance (relative, >= 0).
    depth : float
        Display distance from the objective (m).
    extent : float, optional
        Physical width of the texture on the display (m). By default one
        texture pixel images onto one sensor pixel.
    basis : SpectralBasis, optional
    name : str
    """

    texture: np.ndarray
    depth: float
    extent: float | None = None
    basis: SpectralBasis | None = field(default=None, repr=False)
    name: str = "scene"

    def __post_init__(self):
        t = np.asarray(self.texture, dtype=np.float64)
        if t.ndim != 3 or t.shape[2] != 3:
            raise ValueError("texture must be H x W x 3")
        if not np.all(np.isfinite(t)) or np.any(t < 0):
            raise ValueError("radiance must be finite and non-negative")
        if not self.depth > 0:
            raise ValueError("depth must be positive")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "texture", t)
        if self.basis is None:
            object.__setattr__(self, "basis", SpectralBasis.default())

    @classmethod
    def from_file(cls, path, depth: float, extent: float | None = None) -> "SceneSpec":
        """Load a PNG (sRGB-decoded to linear) or PFM (already linear)."""
        path = Path(path)
        img = fileio.read_image(path)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=-1)
        if path.suffix.lower() != ".pfm":
            img = srgb_to_linear(img)
        return cls(img, depth, extent, name=path.stem)


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


@dataclass(frozen=True, eq=False)
class SensorModel:
    """Sensor spectral responses and noise parameters.

    ``photon_flux`` is the photon rate per pixel per second for unit
    linear radiance integrated against a unit-area spectrum, so the mean
    photoelectron count of a pixel is ``qe * t * photon_flux * signal``.
    """

    response_wavelengths_nm: np.ndarray
    response_rgb: np.ndarray
    band_center_nm: float = 532.0
    band_fwhm_nm: float = 10.0
    exposure_structure: float = 1.0
    exposure_color: float = 0.1
    qe: float = 0.6
    gain: float = 1.0
    read_noise: float = 2.0
    pixel_pitch: float = 2e-6
    shape: tuple[int, int] | None = None
    photon_flux: float = 2.0e4

    def __post_init__(self):
        r = np.asarray(self.response_rgb, dtype=np.float64)
        if r.shape != (3, len(self.response_wavelengths_nm)) or np.any(r < 0) or np.any(r > 1):
            raise ValueError("responses must be a 3 x L array within [0, 1]")
        if self.exposure_structure <= 0 or self.exposure_color <= 0:
            raise ValueError("exposures must be positive")
        if self.read_noise < 0 or self.gain <= 0 or not 0 < self.qe <= 1:
            raise ValueError("need read_noise >= 0, gain > 0, 0 < qe <= 1")
        if self.band_fwhm_nm < 0:
            raise ValueError("band FWHM must be >= 0")
        object.__setattr__(self, "response_rgb", r)

    @classmethod
    def default(cls, **kwargs) -> "SensorModel":
        wl, curves = _read_curves("cmos_rgb_response.csv")
        return cls(wl, curves, **kwargs)

    def replace(self, **changes) -> "SensorModel":
        return dataclasses.replace(self, **changes)

    def rgb_response(self, wavelength_nm) -> np.ndarray:
        wl = np.atleast_1d(np.asarray(wavelength_nm, dtype=np.float64))
        return np.stack([np.interp(wl, self.response_wavelengths_nm, c, left=0.0, right=0.0) for c in self.response_rgb])

    def band_transmission(self, wavelength_nm) -> np.ndarray:
        """Unit-peak Gaussian bandpass filter."""
        wl = np.asarray(wavelength_nm, dtype=np.float64)
        if self.band_fwhm_nm == 0:
            return (wl == self.band_center_nm).astype(np.float64)
        sigma = self.band_fwhm_nm / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        return np.exp(-0.5 * ((wl - self.band_center_nm) / sigma) ** 2)

    def quadrature(self, channel: str) -> tuple[np.ndarray, np.ndarray]:
        """Wavelengths (nm) and per-channel weights ``S_c(lambda_q) dlambda``.

        The structure channel is the sensor green response behind the
        bandpass filter, sampled at the band center and +-0.5, +-1 FWHM.
        A zero-width band degenerates to one line of 1 nm width.
        """
        if channel == "structure":
            if self.band_fwhm_nm == 0:
                wl = np.array([self.band_center_nm])
                dl = 1.0
            else:
                wl = self.band_center_nm + STRUCTURE_OFFSETS_NM * self.band_fwhm_nm / 10.0
                dl = self.band_fwhm_nm / 2.0
            w = (self.band_transmission(wl) * self.rgb_response(wl)[1] * dl)[None, :]
            return wl, w
        if channel == "color":
            wl = COLOR_WAVELENGTHS_NM
            return wl, self.rgb_response(wl) * (wl[1] - wl[0])
        raise ValueError(f"unknown channel {channel!r}")

    def exposure(self, channel: str) -> float:
        return self.exposure_structure if channel == "structure" else self.exposure_color

    def to_dict(self) -> dict:
        return {
            "band_center_nm": self.band_center_nm,
            "band_fwhm_nm": self.band_fwhm_nm,
            "exposure_structure_s": self.exposure_structure,
            "exposure_color_s": self.exposure_color,
            "qe": self.qe,
            "gain_dn_per_e": self.gain,
            "read_noise_e": self.read_noise,
            "pixel_pitch_m": self.pixel_pitch,
            "shape": None if self.shape is None else list(self.shape),
            "photon_flux": self.photon_flux,
            "response_hash": hashlib.sha256(self.response_rgb.tobytes()).hexdigest(),
        }


@dataclass(frozen=True, eq=False)
class MeasurementPair:
    structure: np.ndarray
    color: np.ndarray
    metadata: dict


def check_focus(geom: SystemGeometry, depth: float, wavelength: float) -> float:
    """Defocus phase at the stop edge; raise if the scene is out of focus."""
    delta = residual_defocus(geom, depth, wavelength)
    k = 2.0 * math.pi / wavelength
    edge = 0.5 * k * abs(delta) * (geom.eyepiece_diameter / 2.0) ** 2
    if edge > FOCUS_TOLERANCE_RAD:
        raise UnfocusedGeometryError(
            f"scene at {depth * 1e3:.1f} mm is defocused by {edge:.2f} rad at the stop edge at "
            f"{wavelength * 1e9:.0f} nm (> {FOCUS_TOLERANCE_RAD} rad); refocus with autofocus_solve"
        )
    return edge


def _bin(a: np.ndarray, factor: int) -> np.ndarray:
    n = a.shape[0] // factor
    return a[: n * factor, : n * factor].reshape(n, factor, n, factor).sum(axis=(1, 3))


class PsfCache:
    """Sensor-pitch PSF kernels keyed by geometry, depth, wavelength and field point."""

    def __init__(self):
        self._store: dict = {}

    def __len__(self) -> int:
        return len(self._store)

    def kernel(self, geom: SystemGeometry, depth: float, wavelength: float, pixel_pitch: float,
               x0=(0.0, 0.0), n: int = PSF_N) -> np.ndarray:
        """Unit-sum PSF sampled at ``pixel_pitch`` and centered on its paraxial image point."""
        factor = int(round(pixel_pitch / PSF_PITCH))
        if factor < 1 or not math.isclose(factor * PSF_PITCH, pixel_pitch, rel_tol=1e-9):
            raise SamplingError(
                f"pixel pitch {pixel_pitch * 1e6:g} um is not an integer multiple of the "
                f"{PSF_PITCH * 1e6:g} um PSF pitch",
                criterion="integer PSF binning",
            )
        key = (geom.digest(), float(depth), float(wavelength), float(pixel_pitch), tuple(map(float, x0)), n)
        if key not in self._store:
            p = psf(geom, depth, wavelength, x0, n=n, pitch=PSF_PITCH, with_strehl=False)
            k = _bin(np.asarray(p.intensity), factor)
            k = k / k.sum()
            k.setflags(write=False)
            self._store[key] = k
        return self._store[key]


def sensor_scene(scene: SceneSpec, geom: SystemGeometry, sensor: SensorModel) -> tuple[np.ndarray, float]:
    """Ideal geometric image of the texture on the sensor grid.

    Returns the ``H x W x 3`` radiance image (inverted when ``gamma < 0``)
    and the display extent used.
    """
    gamma = magnification_and_efl(geom, scene.depth).gamma
    h, w = scene.texture.shape[:2]
    p = sensor.pixel_pitch
    extent = scene.extent if scene.extent is not None else w * p / abs(gamma)
    scale = abs(gamma) * extent / w / p
    img = np.asarray(scene.texture)
    if not math.isclose(scale, 1.0, rel_tol=1e-9):
        size = (max(1, int(round(w * scale))), max(1, int(round(h * scale))))
        interp = cv2.INTER_AREA if scale < 1 else cv2.INTER_LINEAR
        img = cv2.resize(img, size, interpolation=interp)
    if gamma < 0:
        img = img[::-1, ::-1]
    if sensor.shape is not None:
        canvas = np.zeros((sensor.shape[0], sensor.shape[1], 3))
        hh, ww = min(img.shape[0], sensor.shape[0]), min(img.shape[1], sensor.shape[1])
        oy, ox = (sensor.shape[0] - hh) // 2, (sensor.shape[1] - ww) // 2
        iy, ix = (img.shape[0] - hh) // 2, (img.shape[1] - ww) // 2
        canvas[oy:oy + hh, ox:ox + ww] = img[iy:iy + hh, ix:ix + ww]
        img = canvas
    return np.ascontiguousarray(img), extent


def effective_kernels(geom: SystemGeometry, depth: float, basis: SpectralBasis, wavelengths_nm, weights,
                      pixel_pitch: float, cache: PsfCache, x0=(0.0, 0.0), workers: int = 1) -> np.ndarray:
    """Kernels ``K[c, b] = sum_q w[c, q] B_b(lambda_q) PSF_q``, shape ``(C, 3, n, n)``."""
    wls = np.asarray(wavelengths_nm, dtype=np.float64)

    def one(wl):
        return cache.kernel(geom, depth, wl * 1e-9, pixel_pitch, x0)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            psfs = list(ex.map(one, wls))
    else:
        psfs = [one(wl) for wl in wls]
    stack = np.stack(psfs)
    prim = basis(wls)
    coef = np.asarray(weights)[:, None, :] * prim[None, :, :]
    return np.einsum("cbq,qyx->cbyx", coef, stack)


def _convolve_stack(img: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    out = np.zeros((kernels.shape[0],) + img.shape[:2])
    for c in range(kernels.shape[0]):
        for b in range(3):
            out[c] += signal.fftconvolve(img[..., b], kernels[c, b], mode="same")
    return np.maximum(out, 0.0)


def _field_grid_weights(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear weights for a 3 x 3 PSF grid at the image corners, edges and center."""
    h, w = shape

    def tent(n):
        t = np.linspace(-1.0, 1.0, n)
        return np.stack([np.clip(-t, 0, 1), 1.0 - np.abs(t), np.clip(t, 0, 1)])

    return tent(h), tent(w)


def render_spectral(scene: SceneSpec, geom: SystemGeometry, sensor: SensorModel, wavelengths_nm, weights,
                    *, cache: PsfCache | None = None, shift_variant: bool = False, workers: int = 1) -> np.ndarray:
    """Noise-free photon-rate image for explicit quadrature ``(lambda_q, w[c, q])``.

    Units are photons per pixel per second divided by ``photon_flux``.
    Returns ``(C, H, W)``.
    """
    cache = cache if cache is not None else PsfCache()
    img, _ = sensor_scene(scene, geom, sensor)
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if not shift_variant:
        ker = effective_kernels(geom, scene.depth, scene.basis, wavelengths_nm, weights, sensor.pixel_pitch,
                                cache, workers=workers)
        return _convolve_stack(img, ker)
    h, w = img.shape[:2]
    gamma = magnification_and_efl(geom, scene.depth).gamma
    wy, wx = _field_grid_weights((h, w))
    out = np.zeros((weights.shape[0], h, w))
    half = (np.array([(h - 1) / 2.0, (w - 1) / 2.0]) * sensor.pixel_pitch)
    for iy, fy in enumerate((-1, 0, 1)):
        for ix, fx in enumerate((-1, 0, 1)):
            # source position whose paraxial image lands on this grid node
            x0 = (fx * half[1] / gamma, fy * half[0] / gamma)
            ker = effective_kernels(geom, scene.depth, scene.basis, wavelengths_nm, weights, sensor.pixel_pitch,
                                    cache, x0=x0, workers=workers)
            out += _convolve_stack(img, ker) * (wy[iy][:, None] * wx[ix][None, :])[None]
    return out


class NoiseStream:
    """Counter-based uniforms keyed by (seed, image index, channel, component).

    The value for pixel ``i`` is read at counter position ``i`` of a Philox
    stream, so any pixel subset can be drawn independently of order.
    """

    def __init__(self, seed: int, image_index: int, channel: int, component: int):
        mix = zlib.crc32(f"{image_index}:{channel}:{component}".encode())
        key = np.array([seed & 0xFFFFFFFFFFFFFFFF, (image_index & 0xFFFFFFFF) << 32 | mix], dtype=np.uint64)
        self.key = key

    def uniforms(self, n: int, start: int = 0) -> np.ndarray:
        bg = np.random.Philox(key=self.key)
        if start:
            bg.advance(start // 4)
            skip = start % 4
        else:
            skip = 0
        raw = bg.random_raw(n + skip)[skip:]
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def apply_noise(expected_e: np.ndarray, sensor: SensorModel, seed: int, image_index: int, channel: int) -> np.ndarray:
    """Poisson photoelectrons, gain and Gaussian read noise; returns DN >= 0."""
    flat = np.asarray(expected_e, dtype=np.float64).ravel()
    u1 = NoiseStream(seed, image_index, channel, 0).uniforms(flat.size)
    u2 = NoiseStream(seed, image_index, channel, 1).uniforms(flat.size)
    electrons = np.where(flat > 0, stats.poisson.ppf(u1, np.maximum(flat, 1e-300)), 0.0)
    read = sensor.read_noise * special.ndtri(u2)
    dn = sensor.gain * (electrons + read)
    return np.maximum(dn, 0.0).reshape(np.shape(expected_e))


def render_measurement(
    scene: SceneSpec,
    geom: SystemGeometry,
    sensor: SensorModel,
    channel: str,
    seed: int = 0,
    *,
    image_index: int = 0,
    noise: bool = True,
    cache: PsfCache | None = None,
    shift_variant: bool = False,
    workers: int = 1,
    return_expected: bool = False,
):
    """Render one capture in DN.

    Parameters
    ----------
    channel : {"structure", "color"}
        Structure image (bandpass, green response, ``exposure_structure``)
        or color cue (full RGB responses, ``exposure_color``).
    seed, image_index : int
        Noise key; identical keys give bit-identical images.
    noise : bool
        ``False`` returns the noise-free expected DN.
    return_expected : bool
        Also return the expected photoelectron image.

    Returns
    -------
    ndarray
        ``H x W`` for the structure channel, ``H x W x 3`` for the color cue.

    Raises
    ------
    UnfocusedGeometryError
        If the scene depth is not in focus at the band center.
    """
    check_focus(geom, scene.depth, sensor.band_center_nm * 1e-9)
    wl, w = sensor.quadrature(channel)
    rate = render_spectral(scene, geom, sensor, wl, w, cache=cache, shift_variant=shift_variant, workers=workers)
    expected = sensor.qe * sensor.exposure(channel) * sensor.photon_flux * rate
    ch_id = 0 if channel == "structure" else 1
    if noise:
        dn = np.stack([apply_noise(expected[c], sensor, seed, image_index, 3 * ch_id + c) for c in range(expected.shape[0])])
    else:
        dn = sensor.gain * expected
    img = dn[0] if channel == "structure" else np.moveaxis(dn, 0, -1)
    exp_img = expected[0] if channel == "structure" else np.moveaxis(expected, 0, -1)
    return (img, exp_img) if return_expected else img


def render_pair(scene: SceneSpec, geom: SystemGeometry, sensor: SensorModel, seed: int = 0, *,
                image_index: int = 0, noise: bool = True, cache: PsfCache | None = None,
                shift_variant: bool = False, workers: int = 1) -> MeasurementPair:
    """Structure image and color cue of one scene with shared geometry."""
    cache = cache if cache is not None else PsfCache()
    kw = dict(image_index=image_index, noise=noise, cache=cache, shift_variant=shift_variant, workers=workers)
    i_s = render_measurement(scene, geom, sensor, "structure", seed, **kw)
    i_c = render_measurement(scene, geom, sensor, "color", seed, **kw)
    meta = {
        "seed": int(seed),
        "image_index": int(image_index),
        "noise": bool(noise),
        "shift_variant": bool(shift_variant),
        "depth_m": scene.depth,
        "geometry_hash": geom.digest(),
        "sensor": sensor.to_dict(),
        "scene_hash": hashlib.sha256(np.ascontiguousarray(scene.texture).tobytes()).hexdigest(),
        "scene_name": scene.name,
    }
    return MeasurementPair(i_s, i_c, meta)


def ground_truth(scene: SceneSpec, geom: SystemGeometry, sensor: SensorModel) -> np.ndarray:
    """Ideal magnified scene on the sensor grid (linear RGB)."""
    return sensor_scene(scene, geom, sensor)[0]


@dataclass(frozen=True)
class RapsdCurve:
    radius: np.ndarray
    frequency_cyc_per_px: np.ndarray
    frequency_lpmm: np.ndarray | None
    power: np.ndarray
    counts: np.ndarray

    @property
    def total_power(self) -> float:
        return float(np.sum(self.power * self.counts))


def rapsd(image: np.ndarray, pixel_pitch: float | None = None) -> RapsdCurve:
    """Radially averaged power spectral density.

    ``power = |FFT|^2 / (H W)`` binned into integer-radius annuli about DC,
    where the radius is measured in units of ``1 / min(H, W)`` cycles per
    pixel. All annuli are kept, so ``sum(power * counts)`` equals
    ``sum(image**2)`` (Parseval).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or not np.all(np.isfinite(img)):
        raise ValueError("rapsd needs a finite 2-D image")
    h, w = img.shape
    n = min(h, w)
    spec = np.abs(np.fft.fft2(img)) ** 2 / (h * w)
    fy = np.fft.fftfreq(h) * n
    fx = np.fft.fftfreq(w) * n
    r = np.rint(np.hypot(fy[:, None], fx[None, :])).astype(np.int64).ravel()
    counts = np.bincount(r)
    sums = np.bincount(r, weights=spec.ravel())
    keep = counts > 0
    radius = np.nonzero(keep)[0]
    freq = radius / n
    lpmm = None if pixel_pitch is None else freq / pixel_pitch * 1e-3
    return RapsdCurve(radius, freq, lpmm, sums[keep] / counts[keep], counts[keep])


def _hann2(shape):
    return np.outer(np.hanning(shape[0]), np.hanning(shape[1]))


def transfer_from_rapsd(render, reference, noise_power=0.0) -> tuple[np.ndarray, np.ndarray]:
    """Radial transfer estimate ``sqrt(P_render / P_reference)``, DC-normalized.

    Both images are Hann-windowed so DC carries the mean level.
    ``noise_power`` (per-pixel variance of white noise in ``render``) is
    subtracted from the render spectrum first. Passing equal-shape sequences
    of renders and references pools their spectra before the ratio, which
    gives a set-level estimate that sparse-spectrum scenes cannot dominate.
    """
    renders = [render] if np.ndim(render) == 2 else list(render)
    refs = [reference] if np.ndim(reference) == 2 else list(reference)
    noise = np.broadcast_to(np.asarray(noise_power, dtype=np.float64), (len(renders),))
    if len(refs) != len(renders) or len({np.shape(r) for r in renders + refs}) != 1:
        raise ValueError("renders and references must pair up with one shape")
    win = _hann2(np.shape(renders[0]))
    wsum = np.mean(win**2)
    num = 0.0
    den = 0.0
    for r, g, npow in zip(renders, refs, noise):
        pr = rapsd(np.asarray(r) * win)
        num = num + np.maximum(pr.power - npow * wsum, 0.0)
        den = den + rapsd(np.asarray(g) * win).power
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sqrt(np.where(den > 0, num / den, 0.0))
    t = t / t[0] if t[0] > 0 else t
    return pr.frequency_cyc_per_px, t


def mtf50(render, reference, noise_power=0.0) -> float:
    """First frequency (cycles/pixel) where the RAPSD transfer drops below 0.5.

    Accepts the same single-image or pooled inputs as `transfer_from_rapsd`.
    """
    freq, t = transfer_from_rapsd(render, reference, noise_power)
    n = len(freq)
    limit = np.searchsorted(freq, 0.5, side="right")
    for i in range(1, min(n, limit)):
        if t[i] < 0.5:
            return float(freq[i - 1] + (t[i - 1] - 0.5) * (freq[i] - freq[i - 1]) / (t[i - 1] - t[i]))
    return float(freq[min(n, limit) - 1])


def item_key(name: str, repetition: int) -> int:
    """Stable 32-bit image index from the source name and repetition."""
    return zlib.crc32(f"{name}#{repetition}".encode())


def generate_dataset(
    scene_dir,
    out_dir,
    geom: SystemGeometry,
    sensor: SensorModel,
    count: int,
    seed: int = 0,
    *,
    depth: float = 0.673,
    noise: bool = True,
    workers: int = 1,
    resume: bool = True,
) -> dict:
    """Render ``count`` (structure, color, ground truth) triples.

    Sources are the sorted PNG/PFM files of ``scene_dir``, cycled. Each
    item's noise key depends only on ``seed``, the source file name and
    the repetition index, so skipping a corrupt file leaves every other
    item unchanged. Items already on disk with a matching key are reused
    when ``resume`` is set. Writes ``manifest.json`` (no timestamps).
    """
    scene_dir, out_dir = Path(scene_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in scene_dir.iterdir() if p.suffix.lower() in (".png", ".pfm"))
    if not files:
        raise FileNotFoundError(f"no PNG/PFM scenes in {scene_dir}")
    cache = PsfCache()
    items = []
    for k in range(count):
        src = files[k % len(files)]
        rep = k // len(files)
        index = item_key(src.name, rep)
        stem = f"item_{k:05d}"
        entry = {"item": k, "source": src.name, "repetition": rep, "image_index": index, "seed": int(seed)}
        try:
            raw = src.read_bytes()
            entry["source_sha256"] = fileio.sha256_bytes(raw)
            scene = SceneSpec.from_file(src, depth)
        except (OSError, ValueError) as exc:
            entry["status"] = "skipped"
            entry["error"] = f"{type(exc).__name__}: {exc}"
            items.append(entry)
            continue
        outputs = {n: out_dir / f"{stem}_{n}.pfm" for n in ("structure", "color", "gt")}
        key_file = out_dir / f"{stem}.json"
        item_cfg = {
            "source_sha256": entry["source_sha256"], "image_index": index, "seed": int(seed),
            "geometry_hash": geom.digest(), "sensor": sensor.to_dict(), "depth_m": depth, "noise": noise,
        }
        if resume and key_file.exists() and all(p.exists() for p in outputs.values()):
            if json.loads(key_file.read_text()).get("config") == item_cfg:
                entry.update(json.loads(key_file.read_text())["entry"])
                items.append(entry)
                continue
        pair = render_pair(scene, geom, sensor, seed, image_index=index, noise=noise, cache=cache, workers=workers)
        gt = ground_truth(scene, geom, sensor)
        fileio.write_pfm(outputs["structure"], pair.structure.astype(np.float32))
        fileio.write_pfm(outputs["color"], pair.color.astype(np.float32))
        fileio.write_pfm(outputs["gt"], gt.astype(np.float32))
        entry["status"] = "ok"
        entry["files"] = {n: p.name for n, p in outputs.items()}
        entry["sha256"] = {n: fileio.sha256_file(p) for n, p in outputs.items()}
        fileio.write_json(key_file, {"config": item_cfg, "entry": {k2: entry[k2] for k2 in ("status", "files", "sha256")}})
        items.append(entry)
    manifest = {
        "geometry": geom.to_dict(),
        "geometry_hash": geom.digest(),
        "sensor": sensor.to_dict(),
        "depth_m": depth,
        "count": count,
        "seed": int(seed),
        "noise": noise,
        "items": items,
    }
    fileio.write_json(out_dir / "manifest.json", manifest)
    return manifest


def write_rapsd_csv(path, curve: RapsdCurve):
    cols = [curve.frequency_cyc_per_px, curve.power, curve.counts.astype(np.float64)]
    header = ["frequency_cyc_per_px", "power", "count"]
    if curve.frequency_lpmm is not None:
        cols.insert(1, curve.frequency_lpmm)
        header.insert(1, "frequency_lpmm")
    return fileio.write_csv(path, header, cols)
