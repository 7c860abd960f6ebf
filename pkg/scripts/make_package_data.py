"""Regenerate the packaged data files (LUT, spectral curves, textures).

All outputs are deterministic. Run from the repository root:

    python3 scripts/make_package_data.py
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

DATA = Path(__file__).resolve().parents[1] / "src" / "hybridtele" / "data"
WL = np.arange(380, 721, 5, dtype=np.float64)


def gaussian(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def write_lut():
    r = np.arange(50, 131, dtype=np.float64)
    x = (r - 50.0) / 80.0
    phase = 2.05 * np.pi * (x + 0.15 * x * (1.0 - x))
    trans = 0.96 - 0.02 * x - 0.06 * gaussian(r, 108.0, 6.0)
    lines = [
        "# synthetic nanocell LUT: smooth monotone stand-in for simulated SiN pillars",
        "# height 775 nm, pitch 300 nm, 532 nm; not a measured or RCWA-computed library",
        "radius_nm,transmittance,phase_rad",
    ]
    lines += [f"{a:.1f},{t:.6f},{p:.9f}" for a, t, p in zip(r, trans, phase)]
    (DATA / "nanocell_lut_synthetic.csv").write_text("\n".join(lines) + "\n")


def write_spectra():
    # narrow-band display primaries
    b = gaussian(WL, 450.0, 11.0) + 0.04 * gaussian(WL, 490.0, 25.0)
    g = gaussian(WL, 535.0, 17.0)
    r = gaussian(WL, 615.0, 13.0) + 0.03 * gaussian(WL, 580.0, 20.0)
    rows = ["wavelength_nm,r,g,b"] + [f"{w:.0f},{x:.6f},{y:.6f},{z:.6f}" for w, x, y, z in zip(WL, r, g, b)]
    (DATA / "display_primaries.csv").write_text("\n".join(rows) + "\n")
    # generic CMOS colour responses with an IR-cut filter near 660 nm
    ir_cut = 1.0 / (1.0 + np.exp((WL - 660.0) / 8.0))
    floor = 0.02
    sr = (0.50 * gaussian(WL, 605.0, 35.0) + floor) * ir_cut
    sg = (0.55 * gaussian(WL, 535.0, 38.0) + floor) * ir_cut
    sb = (0.45 * gaussian(WL, 465.0, 30.0) + floor) * ir_cut
    rows = ["wavelength_nm,r,g,b"] + [f"{w:.0f},{x:.6f},{y:.6f},{z:.6f}" for w, x, y, z in zip(WL, sr, sg, sb)]
    (DATA / "cmos_rgb_response.csv").write_text("\n".join(rows) + "\n")


def textures(size: int = 192) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(20240601)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    rr = np.hypot(xx - c, yy - c)
    th = np.arctan2(yy - c, xx - c)
    out = {}
    check = ((xx // 16 + yy // 16) % 2).astype(np.float64)
    out["checker"] = np.stack([check, 0.3 + 0.5 * check, 1.0 - 0.7 * check], axis=-1)
    star = 0.5 + 0.5 * np.sign(np.sin(36 * th))
    out["siemens_star"] = np.repeat(star[..., None], 3, axis=-1)
    zone = 0.5 + 0.5 * np.cos(np.pi * rr**2 / (2.2 * size))
    out["zone_plate"] = np.stack([zone, zone, zone], axis=-1)
    f = np.fft.fftfreq(size)
    amp = 1.0 / np.maximum(np.hypot(f[None, :], f[:, None]), 1.0 / size)
    pink = []
    for _ in range(3):
        spec = amp * np.exp(2j * np.pi * rng.random((size, size)))
        img = np.real(np.fft.ifft2(spec))
        pink.append((img - img.min()) / (img.max() - img.min()))
    out["pink_noise"] = np.stack(pink, axis=-1)
    dots = np.zeros((size, size))
    for cy in range(16, size, 32):
        for cx in range(16, size, 32):
            dots[np.hypot(xx - cx, yy - cy) <= 3.0] = 1.0
    out["dot_grid"] = np.repeat(dots[..., None], 3, axis=-1)
    bars = np.array([[1, 1, 1], [1, 1, 0], [0, 1, 1], [0, 1, 0], [1, 0, 1], [1, 0, 0], [0, 0, 1], [0, 0, 0]], float)
    out["color_bars"] = bars[(xx * 8 // size).astype(int)]
    rings = 0.5 + 0.5 * np.sign(np.sin(rr / 3.0))
    out["rings"] = np.stack([rings, 0.8 * rings, 0.6 + 0.4 * rings], axis=-1)
    mond = np.full((size, size, 3), 0.9)
    for _ in range(24):
        x0, y0 = rng.integers(0, size - 20, 2)
        w, h = rng.integers(10, 60, 2)
        mond[y0:y0 + h, x0:x0 + w] = rng.random(3)
    out["mondrian"] = mond
    widths = rng.integers(1, 7, size)
    code = np.repeat(np.arange(size) % 2, widths)[:size].astype(np.float64)
    out["barcode"] = np.repeat(np.tile(code, (size, 1))[..., None], 3, axis=-1)
    grad = np.stack([xx / (size - 1), yy / (size - 1), 1.0 - xx / (size - 1)], axis=-1)
    grad[(np.abs(xx - c) < 24) & (np.abs(yy - c) < 24)] = [1.0, 1.0, 1.0]
    out["gradient_edges"] = grad
    return out


def write_textures():
    tdir = DATA / "textures"
    tdir.mkdir(parents=True, exist_ok=True)
    for name, img in textures().items():
        u8 = np.clip(np.rint(np.clip(img, 0, 1) * 255.0), 0, 255).astype(np.uint8)
        cv2.imwrite(str(tdir / f"{name}.png"), u8[..., ::-1])


if __name__ == "__main__":
    write_lut()
    write_spectra()
    write_textures()
