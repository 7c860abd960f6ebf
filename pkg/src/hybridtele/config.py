"""TOML system configurations with unit-suffixed values."""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .metasurface import PhaseProfile
from .system import LensModel, SystemGeometry
from .units import parse_angle, parse_length

PRODUCTION = "metatele-proto"


def _spatial_frequency(text: str) -> float:
    """Parse ``"250 lp/mm"`` into line pairs per millimeter."""
    value, _, unit = text.strip().partition(" ")
    if unit.strip() != "lp/mm":
        raise ValueError(f"spatial frequency {text!r} needs an lp/mm suffix")
    return float(value)


def load_config(source=PRODUCTION) -> dict:
    """Read a configuration by packaged name or file path."""
    path = Path(source)
    if path.suffix != ".toml" and not path.exists():
        with resources.files("hybridtele.data").joinpath(f"{source}.toml").open("rb") as fh:
            return tomllib.load(fh)
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def geometry_from_config(cfg: dict) -> SystemGeometry:
    obj, eye, lay = cfg["objective"], cfg["eyepiece"], cfg["layout"]
    lam0 = parse_length(eye.get("design_wavelength", "532 nm"))
    kind = eye.get("kind", "quadratic")
    if kind == "polynomial":
        profile = PhaseProfile.polynomial_mm(eye["coefficients_mm"], lam0)
    else:
        profile = PhaseProfile(kind, (), parse_length(eye["focal_length"]), lam0)
    f1 = parse_length(obj["focal_length"])
    lens = LensModel.matched(f1, obj["index"]) if "index" in obj else None
    return SystemGeometry(
        f1=f1,
        m_sep=parse_length(lay["objective_to_eyepiece"]),
        s_sep=parse_length(lay["eyepiece_to_sensor"]),
        profile=profile,
        eyepiece_diameter=parse_length(eye["diameter"]),
        objective_aperture=parse_length(obj.get("aperture", "5 mm")),
        lambda0=lam0,
        lens_model=lens,
        track_offset=parse_length(lay.get("track_offset", "0 mm")),
        pixel_pitch=parse_length(cfg.get("sensor", {}).get("pixel_pitch", "2 um")),
        name=cfg.get("name", "custom"),
    )


def design_limits(cfg: dict) -> dict:
    """Design-section values converted to SI (angles stay in degrees)."""
    d = cfg.get("design", {})
    return {
        "max_separation_sum": parse_length(d.get("max_separation_sum", "12.7 mm")),
        "min_focus_distance": parse_length(d.get("min_focus_distance", "673 mm")),
        "strehl_on_axis": float(d.get("strehl_on_axis", 0.8)),
        "strehl_off_axis": float(d.get("strehl_off_axis", 0.13)),
        "mtf_cutoff_lpmm": _spatial_frequency(d.get("mtf_cutoff", "250 lp/mm")),
        "max_field_angle_deg": parse_angle(d.get("max_field_angle", "3 deg")),
        "nanocell_pitch": parse_length(d.get("nanocell_pitch", "300 nm")),
    }


def production_geometry() -> SystemGeometry:
    """The shipped prototype geometry."""
    return geometry_from_config(load_config(PRODUCTION))
