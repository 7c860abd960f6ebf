"""Print the production design numbers, field Strehl and spot RMS.

    python3 demos/design_summary.py
"""
import numpy as np

from hybridtele import production_geometry
from hybridtele.design import hyperfocal
from hybridtele.system import focal_plane, mtf, psf, spot_trace

LAMBDA0 = 532e-9


def main():
    g = production_geometry()
    z_f = focal_plane(g, LAMBDA0)
    print(f"EFL {g.efl * 1e3:.2f} mm  TTL {g.ttl * 1e3:.2f} mm  ratio {g.telephoto_ratio:.3f}")
    print(f"in-focus object distance at 532 nm: {z_f:.3f} m")
    h = hyperfocal(5e-3, g.efl, LAMBDA0, 2e-6)
    print(f"hyperfocal {h.hyperfocal:.1f} m (N = {h.f_number:.1f}, Airy {h.airy_diameter * 1e6:.2f} um)")
    on = psf(g, z_f, LAMBDA0)
    print(f"on-axis Strehl {on.strehl:.3f}, design MTF cutoff {mtf(on).cutoff_design_lpmm:.0f} lp/mm")
    print("angle  Strehl  spot RMS at infinity")
    for a in np.linspace(0.0, 3.0, 7):
        s = psf(g, z_f, LAMBDA0, field_angle=a, n=512).strehl
        print(f"{a:4.1f}   {s:.3f}   {spot_trace(g, a).rms * 1e6:6.1f} um")


if __name__ == "__main__":
    main()
