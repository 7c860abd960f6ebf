import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fresnel_direct
from hybridtele.errors import AliasingError, OutOfRangeError, SamplingError
from hybridtele.field import (
    ApertureMask,
    ComplexField,
    GridSpec,
    apply_phase_profile,
    apply_thin_lens,
    fresnel_propagate,
    point_source_field,
    select_method,
)
from hybridtele.metasurface import PhaseProfile

LAM = 532e-9


def gaussian_field(n, dx, w0, lam=LAM):
    x = (np.arange(n) - n // 2) * dx
    X, Y = np.meshgrid(x, x)
    return ComplexField(np.exp(-(X**2 + Y**2) / w0**2).astype(complex), dx, lam), x


def rel_rms(a, b):
    return float(np.sqrt(np.mean(np.abs(a - b) ** 2) / np.mean(np.abs(b) ** 2)))


class TestComplexField:
    def test_rejects_odd_or_small_grids(self):
        with pytest.raises(ValueError):
            ComplexField(np.ones((63, 63), complex), 1e-6, LAM)
        with pytest.raises(ValueError):
            ComplexField(np.ones((32, 32), complex), 1e-6, LAM)

    def test_rejects_wavelength_outside_visible(self):
        with pytest.raises(ValueError):
            ComplexField(np.ones((64, 64), complex), 1e-6, 1064e-9)

    def test_amplitude_is_read_only_copy(self):
        a = np.ones((64, 64), complex)
        f = ComplexField(a, 1e-6, LAM)
        a[0, 0] = 5
        assert f.amplitude[0, 0] == 1
        with pytest.raises(ValueError):
            f.amplitude[0, 0] = 2

    def test_power_is_sum_times_pitch_squared(self):
        f = ComplexField(np.full((64, 64), 2.0 + 0j), 1e-6, LAM)
        assert f.power == pytest.approx(4 * 64 * 64 * 1e-12)


class TestPointSource:
    def test_collimated_limit_is_uniform(self):
        f = point_source_field((0, 0), math.inf, LAM, GridSpec(64, 5e-6))
        assert np.allclose(np.angle(f.amplitude), 0)
        assert f.power == pytest.approx(1.0)

    def test_on_axis_phase_symmetric_and_zero_at_center(self):
        f = point_source_field((0, 0), 0.673, LAM, GridSpec(128, 5e-6))
        ph = np.angle(f.amplitude)
        assert ph[64, 64] == pytest.approx(0.0)
        assert np.allclose(ph[:, 1:], ph[:, 1:][:, ::-1], atol=1e-12)

    def test_off_axis_phase_minimum_at_source(self):
        # independent scalar evaluation of k |x0 - x|^2 / (2 z0)
        grid = GridSpec(128, 20e-6)
        f = point_source_field((1e-3, 0.0), 0.673, LAM, grid)
        k = 2 * math.pi / LAM
        for ix, iy in [(64, 64), (100, 64), (114, 70), (3, 120)]:
            x, y = (ix - 64) * 20e-6, (iy - 64) * 20e-6
            expect = k * ((x - 1e-3) ** 2 + y**2) / (2 * 0.673)
            got = np.angle(f.amplitude[iy, ix] / abs(f.amplitude[iy, ix]))
            assert np.angle(np.exp(1j * (got - expect))) == pytest.approx(0.0, abs=1e-9)
        # quadratic phase is smallest where x = x0 (index 64 + 50)
        unwrapped = k * (((np.arange(128) - 64) * 20e-6 - 1e-3) ** 2) / (2 * 0.673)
        assert np.argmin(unwrapped) == 114

    def test_z0_zero_is_domain_error(self):
        with pytest.raises(OutOfRangeError):
            point_source_field((0, 0), 0.0, LAM, GridSpec(64, 1e-6))

    def test_nyquist_violation_raises_with_required_n(self):
        with pytest.raises(AliasingError) as info:
            point_source_field((0, 0), 1e-3, LAM, GridSpec(256, 10e-6))
        assert info.value.n_required > 256


class TestPropagation:
    def test_transfer_matches_direct_quadrature(self):
        # oracle: 4x oversampled direct Riemann sum of the continuous Gaussian
        f, x = gaussian_field(64, 10e-6, 60e-6)
        z = 5e-3
        out = fresnel_propagate(f, z, method="transfer")
        xf = (np.arange(256) - 128) * 2.5e-6
        Xf, Yf = np.meshgrid(xf, xf)
        ref = fresnel_direct(xf, np.exp(-(Xf**2 + Yf**2) / (60e-6) ** 2), x, z, LAM)
        assert rel_rms(out.amplitude, ref) <= 1e-6

    def test_impulse_matches_direct_sum_on_its_grid(self):
        f, x = gaussian_field(64, 4e-6, 30e-6)
        z = 20e-3
        out = fresnel_propagate(f, z, method="impulse", pad=1)
        xo = (np.arange(64) - 32) * out.pitch
        ref = fresnel_direct(x, np.asarray(f.amplitude), xo, z, LAM)
        assert out.pitch == pytest.approx(LAM * z / (64 * 4e-6))
        assert rel_rms(out.amplitude, ref) <= 1e-6

    @pytest.mark.parametrize("z", [0.01, 0.05, 0.1])
    def test_gaussian_width_law(self, z):
        w0 = 100e-6
        f, x = gaussian_field(256, 5e-6, w0)
        method = select_method(5e-6, LAM, z, 512)
        out = fresnel_propagate(f, z, method=method)
        X, Y = out.mesh()
        inten = out.intensity
        w_meas = math.sqrt(2 * np.sum((X**2 + Y**2) * inten) / np.sum(inten))
        z_r = math.pi * w0**2 / LAM
        assert w_meas == pytest.approx(w0 * math.sqrt(1 + (z / z_r) ** 2), rel=0.01)

    def test_transfer_conserves_power(self):
        f, _ = gaussian_field(128, 5e-6, 80e-6)
        out = fresnel_propagate(f, 0.01, method="transfer")
        assert out.power == pytest.approx(f.power, rel=1e-9)

    def test_zero_distance_is_identity(self):
        f, _ = gaussian_field(64, 5e-6, 40e-6)
        assert fresnel_propagate(f, 0.0) is f

    def test_transfer_kernel_undersampling_raises(self):
        f, _ = gaussian_field(64, 1e-6, 10e-6)
        with pytest.raises(SamplingError) as info:
            fresnel_propagate(f, 1.0, method="transfer")
        assert info.value.n_required > 64

    def test_containment_failure_raises(self):
        f, _ = gaussian_field(64, 10e-6, 20e-6)
        with pytest.raises(SamplingError):
            fresnel_propagate(f, 0.1, method="transfer", pad=1)

    def test_converging_input_curvature_relaxes_chirp_check(self):
        # the raw samples of a fast converging phase are aliased, but the
        # product with the propagation chirp that the FFT sees is not
        n, dx, zf = 256, 4e-6, 2e-3
        x = (np.arange(n) - n // 2) * dx
        X, Y = np.meshgrid(x, x)
        k = 2 * math.pi / LAM
        amp = np.exp(-1j * k * (X**2 + Y**2) / (2 * zf)) * (X**2 + Y**2 <= (0.4e-3) ** 2)
        f = ComplexField(amp, dx, LAM)
        with pytest.raises(SamplingError):
            fresnel_propagate(f, zf * 0.9, method="impulse")
        out = fresnel_propagate(f, zf * 0.9, method="impulse", input_curvature=-1 / zf)
        assert np.isfinite(out.amplitude).all()
        focus = fresnel_propagate(f, zf, method="impulse", input_curvature=-1 / zf)
        assert np.unravel_index(np.argmax(focus.intensity), (n, n)) == (n // 2, n // 2)

    def test_thin_lens_collimates_source_at_focus(self):
        f1 = 0.05
        grid = GridSpec(128, 5e-6)
        src = point_source_field((0, 0), f1, LAM, grid)
        out = apply_thin_lens(src, f1)
        ph = np.angle(out.amplitude / out.amplitude[64, 64])
        assert np.max(np.abs(ph)) < 1e-9

    def test_infinite_focal_length_is_identity(self):
        f, _ = gaussian_field(64, 5e-6, 40e-6)
        assert apply_thin_lens(f, math.inf) is f

    def test_phase_profile_uses_design_wavenumber(self):
        prof = PhaseProfile.quadratic(-2e-3)
        mask = ApertureMask(0.2e-3)
        f = ComplexField(np.ones((128, 128), complex), 2e-6, 633e-9)
        out = apply_phase_profile(f, prof, mask)
        X, Y = out.mesh()
        inside = X**2 + Y**2 < (0.09e-3) ** 2
        expect = np.exp(1j * prof.phase(X, Y))
        assert np.allclose(out.amplitude[inside], expect[inside])
        assert np.all(out.amplitude[X**2 + Y**2 > (0.1e-3) ** 2] == 0)


@settings(max_examples=25, deadline=None)
@given(
    w0=st.floats(30e-6, 80e-6),
    z=st.floats(1e-3, 2e-2),
)
def test_transfer_power_conservation_property(w0, z):
    f, _ = gaussian_field(128, 5e-6, w0)
    out = fresnel_propagate(f, z, method="transfer", check=False)
    assert out.power == pytest.approx(f.power, rel=1e-9)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_impulse_matches_direct_sum_on_random_fields(seed):
    rng = np.random.default_rng(seed)
    n, dx, z = 64, 5e-6, 10e-3
    amp = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    x = (np.arange(n) - n // 2) * dx
    out = fresnel_propagate(ComplexField(amp, dx, LAM), z, method="impulse", pad=1, check=False)
    xo = (np.arange(n) - n // 2) * out.pitch
    ref = fresnel_direct(x, amp, xo, z, LAM)
    assert rel_rms(out.amplitude, ref) <= 1e-6


def test_propagation_semigroup():
    f, _ = gaussian_field(256, 4e-6, 60e-6)
    a = fresnel_propagate(fresnel_propagate(f, 3e-3, method="transfer"), 5e-3, method="transfer")
    b = fresnel_propagate(f, 8e-3, method="transfer")
    assert rel_rms(a.amplitude, b.amplitude) <= 1e-4


def test_lens_focus_concentrates_power_in_airy_core():
    # plane wave through a 1 mm stop and f1 = 7.5 mm, observed at the focal plane
    n, dx, f1, d = 4096, 2e-6, 7.5e-3, 1e-3
    grid = GridSpec(n, dx)
    plane = point_source_field((0, 0), math.inf, LAM, grid)
    X, Y = plane.mesh()
    stop = (X**2 + Y**2 <= (d / 2) ** 2).astype(float)
    lensed = apply_thin_lens(plane, f1, transmittance=stop)
    focus = fresnel_propagate(lensed, f1, method="impulse", pad=1, input_curvature=-1 / f1)
    Xo, Yo = focus.mesh()
    inten = focus.intensity
    cx = np.sum(Xo * inten) / inten.sum()
    cy = np.sum(Yo * inten) / inten.sum()
    assert abs(cx) < focus.pitch and abs(cy) < focus.pitch
    r_airy = 1.22 * LAM * f1 / d
    frac = inten[Xo**2 + Yo**2 <= r_airy**2].sum() / inten.sum()
    assert frac > 0.70
