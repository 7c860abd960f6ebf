"""Acceptance criteria AC1 to AC10.

Each test records a PASS/FAIL line with its runtime; the lines are printed
in the terminal summary by ``conftest.pytest_terminal_summary``.
"""
import math
import time
from contextlib import contextmanager
from importlib import resources

import numpy as np
import pytest
from scipy import stats

from conftest import fresnel_direct
from hybridtele import production_geometry
from hybridtele.design import (
    PerturbationSpec,
    autofocus_solve,
    hyperfocal,
    matched_refractive,
    tolerance_sweep,
    zoom_solve,
)
from hybridtele.field import ComplexField, fresnel_propagate, select_method
from hybridtele.imaging import (
    PsfCache,
    SceneSpec,
    SensorModel,
    generate_dataset,
    ground_truth,
    mtf50,
    rapsd,
    render_measurement,
    render_spectral,
)
from hybridtele.metasurface import PhaseProfile, default_lut, fit_quadratic, lut_fit
from hybridtele.system import focal_plane, mtf, psf, spot_trace
from test_imaging import ToyCache, brute_force_render
from test_metasurface import PROTO_POLY_MM, exhaustive_fit

LAMBDA0 = 532e-9
DEPTH = 0.673
RESULTS: dict[str, str] = {}


@contextmanager
def criterion(name, budget_s):
    t0 = time.perf_counter()
    status = "FAIL"
    try:
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"{name} took {elapsed:.1f} s (budget {budget_s} s)"
        status = "PASS"
    finally:
        RESULTS[name] = f"{name} {status} ({time.perf_counter() - t0:.1f} s, budget {budget_s} s)"


@pytest.fixture(scope="module")
def focused(geom):
    return geom.replace(s_sep=autofocus_solve(geom, DEPTH))


def textures():
    return sorted((resources.files("hybridtele") / "data" / "textures").iterdir())


def channel_coefficients(sensor, channel, scene):
    """Per-output-channel weight of each RGB primary, summed over quadrature."""
    wl, w = sensor.quadrature(channel)
    return (w[:, None, :] * scene.basis(wl)[None]).sum(-1)


def test_ac1_golden_numbers():
    with criterion("AC1", 1.0):
        g = production_geometry()
        assert g.efl == pytest.approx(30e-3, abs=0.1e-3)
        assert g.ttl == pytest.approx(13.2e-3, abs=1e-12)
        assert g.telephoto_ratio == pytest.approx(0.44, abs=0.01)


def test_ac2_hyperfocal():
    with criterion("AC2", 1.0):
        h = hyperfocal(5e-3, 30e-3, LAMBDA0, 2e-6)
        assert h.f_number == pytest.approx(6.0)
        assert h.airy_diameter == pytest.approx(7.79e-6, abs=0.05e-6)
        assert h.hyperfocal == pytest.approx(19.2, abs=0.3)
        assert h.near_limit == pytest.approx(9.6, abs=0.2)


def test_ac3_design_wavelength_quality(geom, z_focus):
    with criterion("AC3", 120.0):
        on = psf(geom, z_focus, LAMBDA0, n=1024)
        assert on.strehl >= 0.8
        for a in np.linspace(0.0, 3.0, 7):
            assert psf(geom, z_focus, LAMBDA0, field_angle=a, n=1024).strehl >= 0.13
        assert mtf(on).cutoff_design_lpmm >= 250


def test_ac4_spot_trend(geom):
    with criterion("AC4", 10.0):
        rms = np.array([spot_trace(geom, a).rms for a in np.linspace(0.0, 3.0, 7)])
        assert np.all(np.diff(rms) > 0)
        assert 7e-6 <= rms[0] <= 13e-6
        assert 79e-6 <= rms[-1] <= 147e-6


def test_ac5_quadratic_convergence(geom, z_focus):
    with criterion("AC5", 60.0):
        poly = PhaseProfile.polynomial_mm(PROTO_POLY_MM)
        fit = fit_quadratic(poly, geom.eyepiece_diameter)
        assert fit.focal_length == pytest.approx(-2.0e-3, abs=0.1e-3)
        gp = geom.replace(profile=poly)
        # each profile at its own paraxial focus
        a = mtf(psf(gp, focal_plane(gp, LAMBDA0), LAMBDA0))
        b = mtf(psf(geom, z_focus, LAMBDA0))
        nu_c = geom.eyepiece_diameter / (LAMBDA0 * geom.s_sep) * 1e-3
        band = b.frequency_lpmm <= nu_c
        rel = np.sqrt(np.mean((a.mtf[band] - b.mtf[band]) ** 2) / np.mean(b.mtf[band] ** 2))
        assert rel < 0.05


def test_ac6_oracle_suite(focused):
    with criterion("AC6", 120.0):
        # FFT Fresnel vs direct quadrature, 64x64
        rng = np.random.default_rng(11)
        u = rng.normal(size=(64, 64)) + 1j * rng.normal(size=(64, 64))
        dx, z = 4e-6, 20e-3
        f = ComplexField(u, dx, LAMBDA0)
        out = fresnel_propagate(f, z, method="impulse", pad=1)
        x_in = (np.arange(64) - 32) * dx
        x_out = (np.arange(64) - 32) * out.pitch
        ref = fresnel_direct(x_in, u, x_out, z, LAMBDA0)
        assert np.linalg.norm(out.amplitude - ref) / np.linalg.norm(ref) <= 1e-6

        # Gaussian-beam width law
        w0, dx = 100e-6, 5e-6
        x = (np.arange(256) - 128) * dx
        X, Y = np.meshgrid(x, x)
        g = ComplexField(np.exp(-(X**2 + Y**2) / w0**2).astype(complex), dx, LAMBDA0)
        for z in (0.01, 0.05, 0.1):
            o = fresnel_propagate(g, z, method=select_method(dx, LAMBDA0, z, 512))
            Xo, Yo = o.mesh()
            inten = o.intensity
            w = math.sqrt(2 * np.sum((Xo**2 + Yo**2) * inten) / np.sum(inten))
            assert w == pytest.approx(w0 * math.hypot(1.0, z * LAMBDA0 / (math.pi * w0**2)), rel=0.01)

        # spectral renderer vs brute-force double loop, pre-noise
        wl = np.array([520.0, 560.0])
        kernels = {}
        for v in wl:
            k = rng.random((5, 5))
            kernels[round(v, 6)] = k / k.sum()
        weights = np.array([[0.7, 0.2], [0.1, 0.9]])
        scene = SceneSpec(rng.random((8, 8, 3)), DEPTH)
        got = render_spectral(scene, focused, SensorModel.default(), wl, weights, cache=ToyCache(kernels))
        ref = brute_force_render(np.asarray(scene.texture), scene.basis, wl, weights, kernels)
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) <= 1e-6

        # LUT fit vs exhaustive search
        lut = default_lut()
        targets = rng.uniform(-4 * math.pi, 4 * math.pi, 10_000)
        np.testing.assert_array_equal(lut_fit(targets, lut), exhaustive_fit(targets, lut))


def test_ac7_tolerance_ordering(geom, z_focus):
    with criterion("AC7", 600.0):
        spec = PerturbationSpec("eyepiece", "lateral-x", 0.02e-3, samples=2)
        hybrid = tolerance_sweep(geom, spec, z0=z_focus, workers=4)
        refr = tolerance_sweep(matched_refractive(geom), spec, z0=z_focus, workers=4)
        assert hybrid.drop[-1] <= refr.drop[-1]
        curve = tolerance_sweep(geom, PerturbationSpec("eyepiece", "lateral-x", 0.04e-3, samples=5),
                                z0=z_focus, workers=4)
        assert np.all(np.diff(curve.mean_strehl) <= 1e-12)


def test_ac8_zoom_and_focus(geom, z_focus):
    with criterion("AC8", 300.0):
        angles = np.linspace(0.0, 3.0, 7)
        for efl in (20e-3, 30e-3, 40e-3, 50e-3):
            m, s = zoom_solve(geom, efl, z_ref=DEPTH)
            g = geom.replace(m_sep=m, s_sep=s)
            assert g.efl == pytest.approx(efl, rel=1e-6)
            mean = np.mean([psf(g, DEPTH, LAMBDA0, field_angle=a, n=512).strehl for a in angles])
            assert mean >= 0.13
        nominal = psf(geom, z_focus, LAMBDA0, n=512).strehl
        for z0 in np.geomspace(0.673, 6.73, 5):
            g = geom.replace(s_sep=autofocus_solve(geom, z0))
            assert psf(g, z0, LAMBDA0, n=512).strehl == pytest.approx(nominal, rel=0.05)


def test_ac9_two_shot_rendering(focused, tmp_path):
    with criterion("AC9", 300.0):
        sensor = SensorModel.default()
        cache = PsfCache()
        pooled = {}
        for path in textures():
            scene = SceneSpec.from_file(path, DEPTH)
            gt = ground_truth(scene, focused, sensor)
            for ch in ("structure", "color"):
                img, exp = render_measurement(scene, focused, sensor, ch, seed=0, cache=cache, return_expected=True)
                img = img.reshape(img.shape[0], img.shape[1], -1)
                exp = exp.reshape(img.shape)
                coef = channel_coefficients(sensor, ch, scene)
                scale = sensor.gain * sensor.qe * sensor.exposure(ch) * sensor.photon_flux
                for c in range(img.shape[2]):
                    lists = pooled.setdefault((ch, c), ([], [], []))
                    lists[0].append(img[..., c])
                    lists[1].append(scale * (gt @ coef[c]))
                    lists[2].append(sensor.gain**2 * (exp[..., c].mean() + sensor.read_noise**2))
        structure = mtf50(*pooled[("structure", 0)])
        worst = min(mtf50(*v) for k, v in pooled.items() if k[0] == "color")
        assert structure >= 2 * worst

        # photon transfer over 100 flat-field renders
        pt = SensorModel.default(gain=2.0, read_noise=3.0)
        ramp = np.linspace(0.2, 1.0, 48)
        flat = SceneSpec(np.repeat(np.tile(ramp, (48, 1))[..., None], 3, axis=-1), DEPTH)
        stack = np.stack([render_measurement(flat, focused, pt, "structure", seed=s, cache=cache) / pt.gain
                          for s in range(100)])
        mean = stack.mean(axis=0).ravel()
        var = stack.var(axis=0, ddof=1).ravel()
        slope, _ = np.polyfit(mean, var - pt.read_noise**2, 1)
        assert slope == pytest.approx(1.0, abs=0.05)

        # identical seeds give bit-identical datasets
        src = resources.files("hybridtele") / "data" / "textures"
        a = generate_dataset(src, tmp_path / "a", focused, sensor, count=10, seed=3)
        b = generate_dataset(src, tmp_path / "b", focused, sensor, count=10, seed=3)
        assert [it["status"] for it in a["items"]] == ["ok"] * 10
        for it in a["items"]:
            for name in it["files"].values():
                assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_ac10_rapsd_sanity(focused):
    with criterion("AC10", 30.0):
        # white-noise flatness, Bonferroni-corrected Gamma bounds per annulus
        n = 256
        rng = np.random.default_rng(5)
        curve = rapsd(rng.normal(size=(n, n)))
        sel = (curve.radius >= 1) & (curve.radius < n // 2)
        k = curve.counts[sel] / 2.0
        alpha = 1e-3 / sel.sum()
        lo = stats.gamma.ppf(alpha / 2, k, scale=1.0 / k)
        hi = stats.gamma.ppf(1 - alpha / 2, k, scale=1.0 / k)
        assert np.all((curve.power[sel] >= lo) & (curve.power[sel] <= hi))

        # Parseval
        img = rng.random((97, 128))
        assert rapsd(img).total_power == pytest.approx(np.sum(img**2), rel=1e-6)

        # structure-image residual is high-pass relative to the ground truth
        sensor = SensorModel.default()
        cache = PsfCache()
        scenes, renders, refs, noise = [], [], [], []
        for path in textures():
            scene = SceneSpec.from_file(path, DEPTH)
            gt = ground_truth(scene, focused, sensor)
            img, exp = render_measurement(scene, focused, sensor, "structure", seed=0, cache=cache,
                                          return_expected=True)
            exp = exp.reshape(exp.shape[:2])
            ref = gt @ channel_coefficients(sensor, "structure", scene)[0]
            scenes.append((exp, ref * exp.mean() / ref.mean()))
            renders.append(img.reshape(exp.shape))
            refs.append(ref)
            noise.append(sensor.gain**2 * (exp.mean() + sensor.read_noise**2))
        band = mtf50(renders, refs, noise)
        for exp, ref in scenes:
            res = rapsd(exp - ref)
            base = rapsd(ref - ref.mean())
            hi_res = np.sum((res.power * res.counts)[res.frequency_cyc_per_px > band]) / res.total_power
            hi_gt = np.sum((base.power * base.counts)[base.frequency_cyc_per_px > band]) / base.total_power
            assert hi_res > 0.5
            assert hi_res > hi_gt
