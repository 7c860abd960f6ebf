import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridtele.errors import UnknownRadiusError
from hybridtele.metasurface import (
    NanocellLut,
    PhaseProfile,
    circular_distance,
    default_lut,
    fit_quadratic,
    layout_to_realized_modulation,
    lut_fit,
    lut_fit_index,
    max_phase_gradient,
    read_layout_binary,
    synthesize_layout,
    wrap_phase,
)
from hybridtele.system import focal_plane, psf

LAMBDA0 = 532e-9
PROTO_POLY_MM = [0.25, -0.0156, 0.2133, -0.6931, -1.5622, -0.0633, 10.8101]


def exhaustive_fit(targets, lut):
    """O(N*M) oracle: minimum circular distance, ties to the smaller radius."""
    d = circular_distance(wrap_phase(targets)[:, None], lut.phase[None, :])
    best = d.min(axis=1, keepdims=True)
    cand = np.abs(d - best) <= 1e-12
    radii = np.where(cand, lut.radius_nm[None, :], np.inf)
    return radii.min(axis=1)


@pytest.fixture(scope="module")
def lut():
    return default_lut()


def test_default_lut_is_marked_synthetic(lut):
    assert lut.synthetic
    assert len(lut) == 81
    assert np.all(np.diff(lut.radius_nm) > 0)
    assert lut.radius_nm[0] >= 50 and lut.radius_nm[-1] <= 130
    assert np.ptp(lut.phase) >= 2 * math.pi


def test_quadratic_profile_sign_and_gradient():
    f = -2e-3
    p = PhaseProfile.quadratic(f)
    r = np.linspace(0, 0.4e-3, 9)
    np.testing.assert_allclose(p.radial(r), -p.k0 * r**2 / (2 * f))
    # diverging lens: phase increases outward
    assert np.all(np.diff(p.radial(r)) > 0)
    gx, gy = p.gradient(3e-4, -1e-4)
    np.testing.assert_allclose([gx, gy], [-p.k0 * 3e-4 / f, p.k0 * 1e-4 / f], rtol=1e-12)


@pytest.mark.parametrize("kind", ["hyperbolic", "spherical"])
def test_exact_profiles_match_quadratic_paraxially(kind):
    f = -2e-3
    p = PhaseProfile(kind, (), f)
    q = PhaseProfile.quadratic(f)
    r = np.array([1e-6, 5e-6])
    np.testing.assert_allclose(p.radial(r), q.radial(r), rtol=1e-5)
    r = np.linspace(1e-6, 0.4e-3, 33)
    h = 1e-9
    numeric = (p.radial(r + h) - p.radial(r - h)) / (2 * h)
    np.testing.assert_allclose(p.radial_derivative(r), numeric, rtol=1e-5)


def test_polynomial_derivative_and_unit_conversion():
    p = PhaseProfile.polynomial_mm(PROTO_POLY_MM)
    np.testing.assert_allclose(p.coefficients_mm(), PROTO_POLY_MM, rtol=1e-12)
    r = np.linspace(1e-5, 0.4e-3, 17)
    h = 1e-9
    numeric = (p.radial(r + h) - p.radial(r - h)) / (2 * h)
    np.testing.assert_allclose(p.radial_derivative(r), numeric, rtol=1e-5)
    # radius 1 mm: phase = k0 * sum(c_i) mm
    assert p.radial(1e-3) == pytest.approx(p.k0 * sum(PROTO_POLY_MM) * 1e-3, rel=1e-12)


def test_prototype_polynomial_fits_minus_two_mm():
    fit = fit_quadratic(PhaseProfile.polynomial_mm(PROTO_POLY_MM), 0.8e-3)
    assert fit.focal_length == pytest.approx(-2.0e-3, abs=0.1e-3)


def test_fit_quadratic_is_exact_for_quadratic():
    fit = fit_quadratic(PhaseProfile.quadratic(-2e-3), 0.8e-3)
    assert fit.focal_length == pytest.approx(-2e-3, rel=1e-12)
    assert fit.rms_residual < 1e-9


def test_fit_quadratic_matches_dense_lstsq():
    p = PhaseProfile("hyperbolic", (), -2e-3)
    # area-weighted oracle via a dense Cartesian disk sample
    x = np.linspace(-0.4e-3, 0.4e-3, 801)
    X, Y = np.meshgrid(x, x)
    R2 = X**2 + Y**2
    m = R2 <= (0.4e-3) ** 2
    A = np.stack([np.ones(m.sum()), R2[m]], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, p.radial(np.sqrt(R2[m])), rcond=None)
    fit = fit_quadratic(p, 0.8e-3)
    assert fit.focal_length == pytest.approx(-p.k0 / (2 * b), rel=1e-3)


def test_max_phase_gradient_quadratic():
    p = PhaseProfile.quadratic(-2e-3)
    assert max_phase_gradient(p, 0.8e-3) == pytest.approx(p.k0 * 0.4e-3 / 2e-3, rel=1e-12)


def test_profile_validation():
    with pytest.raises(ValueError):
        PhaseProfile("quartic", (), 1e-3)
    with pytest.raises(ValueError):
        PhaseProfile.quadratic(0.0)
    with pytest.raises(ValueError):
        PhaseProfile.polynomial([1.0] * 8)
    with pytest.raises(ValueError):
        PhaseProfile("spherical", (), -1e-4).radial(2e-4)


def test_profile_dict_roundtrip():
    p = PhaseProfile.polynomial_mm(PROTO_POLY_MM)
    q = PhaseProfile.from_dict(p.to_dict())
    assert q == p and q.digest() == p.digest()


def test_lut_fit_matches_exhaustive_search(lut):
    rng = np.random.default_rng(7)
    targets = rng.uniform(-4 * math.pi, 4 * math.pi, 10_000)
    np.testing.assert_array_equal(lut_fit(targets, lut), exhaustive_fit(targets, lut))


def test_lut_fit_exact_entries_and_scalar(lut):
    for i in (0, 17, 80):
        got = lut_fit(float(lut.phase[i]), lut)
        assert isinstance(got, float)
        d = circular_distance(lut.phase[i], lut.phase[lut.index_of(got)])
        assert d < 1e-12


def test_lut_fit_tie_goes_to_smaller_radius():
    lut = NanocellLut(
        np.array([60.0, 70.0, 80.0, 90.0]),
        np.full(4, 0.9),
        np.array([-3.0, 0.0, 1.0, 3.3]),
    )
    # 0.5 is equidistant from phases 0 and 1
    assert lut_fit(0.5, lut) == 70.0
    assert lut_fit(0.6, lut) == 80.0
    # duplicated wrapped phase: 2 pi + 0 aliases 0 and wraps around
    lut2 = NanocellLut(np.array([60.0, 70.0, 80.0]), np.ones(3), np.array([2 * math.pi, 3.0, 0.0]))
    assert lut_fit(0.1, lut2) == 60.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=64))
def test_lut_fit_property(targets):
    lut = default_lut()
    t = np.array(targets)
    np.testing.assert_array_equal(lut_fit(t, lut), exhaustive_fit(t, lut))


def test_lut_validation():
    with pytest.raises(ValueError):
        NanocellLut(np.array([40.0, 60.0]), np.ones(2), np.array([0.0, 7.0]))
    with pytest.raises(ValueError):
        NanocellLut(np.array([60.0, 70.0]), np.ones(2), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        NanocellLut(np.array([60.0, 60.0]), np.ones(2), np.array([0.0, 7.0]))


def test_lut_index_of_unknown_radius(lut):
    with pytest.raises(UnknownRadiusError):
        lut.index_of(np.array([60.0, 60.5]))


def test_lut_csv_roundtrip(tmp_path, lut):
    back = NanocellLut.from_csv(lut.to_csv(tmp_path / "lut.csv"))
    assert back.digest() == lut.digest()
    assert back.synthetic


@pytest.fixture(scope="module")
def layout(lut):
    return synthesize_layout(PhaseProfile.quadratic(-2e-3), lut, 0.8e-3)


def test_layout_shape_and_occupancy(layout):
    assert layout.m == 2667
    axis = layout.cell_axis()
    X, Y = np.meshgrid(axis, axis)
    np.testing.assert_array_equal(layout.occupied, X**2 + Y**2 <= (0.4e-3) ** 2)
    assert np.nanmin(layout.radius_nm) >= 50 and np.nanmax(layout.radius_nm) <= 130


def test_layout_independent_of_workers(lut, layout):
    other = synthesize_layout(PhaseProfile.quadratic(-2e-3), lut, 0.8e-3, workers=4, block=97)
    np.testing.assert_array_equal(other.radius_nm, layout.radius_nm)


def test_layout_binary_and_csv_roundtrip(tmp_path, layout):
    r, pitch = read_layout_binary(layout.write_binary(tmp_path / "layout.bin"))
    assert pitch == pytest.approx(300e-9)
    np.testing.assert_array_equal(np.isnan(r), ~layout.occupied)
    np.testing.assert_allclose(r[layout.occupied], layout.radius_nm[layout.occupied])
    small = synthesize_layout(PhaseProfile.quadratic(-2e-3), default_lut(), 6e-6)
    lines = small.write_csv(tmp_path / "layout.csv").read_text().splitlines()
    assert lines[0] == "row,col,radius_nm"
    assert len(lines) - 1 == small.occupied.sum()
    prov = small.provenance()
    assert prov["lut_hash"] == default_lut().digest()
    assert prov["profile_hash"] == small.profile.digest()


def test_realized_phase_error_bounded(lut, layout):
    real = layout_to_realized_modulation(layout, lut)
    err = real.phase_error[layout.occupied]
    assert np.max(np.abs(err)) <= lut.max_gap() / 2 + 1e-9
    assert np.all(real.modulation[~layout.occupied] == 0)


def test_realized_rejects_foreign_radius(lut):
    bad = synthesize_layout(PhaseProfile.quadratic(-2e-3), lut, 3e-6)
    rad = np.array(bad.radius_nm)
    rad[~np.isnan(rad)] = 61.37
    foreign = type(bad)(rad, bad.pitch, bad.aperture, bad.profile, bad.lut_hash)
    with pytest.raises(UnknownRadiusError):
        layout_to_realized_modulation(foreign, lut)


def test_realized_layout_strehl_within_five_percent(geom, z_focus, lut, layout):
    real = layout_to_realized_modulation(layout, lut)
    s_cont = psf(geom, z_focus, LAMBDA0).strehl
    s_real = psf(geom.replace(realized=real), z_focus, LAMBDA0).strehl
    assert abs(s_real - s_cont) <= 0.05 * s_cont


def _kind_strehl(geom, kind):
    g = geom.replace(profile=PhaseProfile(kind, (), -2e-3))
    return psf(g, focal_plane(g, LAMBDA0), LAMBDA0, n=512).strehl


def test_exact_profile_kinds_comparable(geom):
    s = {k: _kind_strehl(geom, k) for k in ("hyperbolic", "spherical")}
    assert abs(s["hyperbolic"] - s["spherical"]) <= 0.1 * max(s.values())
    # residual after best quadratic balancing: Strehl ~ exp(-sigma^2)
    for k, v in s.items():
        sigma = fit_quadratic(PhaseProfile(k, (), -2e-3), 0.8e-3).rms_residual
        assert v == pytest.approx(math.exp(-sigma**2), abs=0.02)


@pytest.mark.xfail(strict=True, reason="spherical residual gives Strehl 0.876 vs 1.0 for quadratic (12% apart)")
def test_all_profile_kinds_within_ten_percent(geom):
    s = [_kind_strehl(geom, k) for k in ("quadratic", "hyperbolic", "spherical")]
    assert max(s) - min(s) <= 0.1 * max(s)
