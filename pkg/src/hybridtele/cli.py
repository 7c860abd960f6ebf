"""Command-line front end.

Every subcommand writes its artifacts and a ``run_manifest.json`` into
``--out`` (default ``runs/<subcommand>``). Exit status is 0 on success,
1 on a domain error and 2 on a usage error. Physical flags need unit
suffixes, e.g. ``--lambda 532nm`` or ``--angle 1.5deg``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, fileio
from .config import design_limits, geometry_from_config, load_config
from .errors import HybridTeleError
from .units import parse_angle, parse_length, parse_time


class UsageError(Exception):
    pass


def _typed(parser_fn, kind):
    def conv(text):
        try:
            return parser_fn(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None

    conv.__name__ = kind
    return conv


LENGTH = _typed(parse_length, "length")
ANGLE = _typed(parse_angle, "angle")
TIME = _typed(parse_time, "time")


def _distance(text):
    if str(text).strip().lower() in ("inf", "infinity"):
        return math.inf
    return LENGTH(text)


def _lpmm(text):
    t = str(text).strip()
    if not t.endswith("lp/mm"):
        raise argparse.ArgumentTypeError(f"spatial frequency {text!r} needs an lp/mm suffix")
    try:
        return float(t[: -len("lp/mm")])
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse spatial frequency {text!r}") from None


DISTANCE = _distance
_distance.__name__ = "distance"
_lpmm.__name__ = "frequency"


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default="metatele-proto", help="geometry TOML path or packaged name")
    p.add_argument("--out", type=Path, default=None, help="output directory (default runs/<subcommand>)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable stdout")
    return p


def _sensor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--depth", type=LENGTH, default=parse_length("673mm"), help="scene distance")
    p.add_argument("--exposure", type=TIME, default=parse_time("1s"), help="structure-image exposure")
    p.add_argument("--exposure-color", type=TIME, default=parse_time("0.1s"), help="color-cue exposure")
    p.add_argument("--gain", type=float, default=1.0, help="DN per electron")
    p.add_argument("--read-noise", type=float, default=2.0, help="electrons RMS")
    p.add_argument("--band-center", type=LENGTH, default=parse_length("532nm"))
    p.add_argument("--band-fwhm", type=LENGTH, default=parse_length("10nm"))
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--shift-variant", action="store_true", help="3x3 PSF grid instead of one PSF")
    p.add_argument("--no-autofocus", action="store_true", help="keep the configured sensor distance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridtele", description=__doc__.splitlines()[0])
    parser.add_argument("--json", action="store_true", default=False, help="machine-readable stdout")
    parser.add_argument("--version", action="version", version=f"hybridtele {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    common = _common()

    p = sub.add_parser("design", parents=[common], help="optimize the telephoto ratio under constraints")
    p.add_argument("--strehl-floor", type=float, default=None)
    p.add_argument("--cutoff", type=_lpmm, default=None, help="MTF cutoff floor, e.g. 250lp/mm")
    p.add_argument("--angle-max", type=ANGLE, default=None)
    p.add_argument("--track-budget", type=LENGTH, default=None, help="limit on m + s")
    p.add_argument("--maxiter", type=int, default=800)
    p.add_argument("--restarts", type=int, default=0)

    for name, helptext in (("psf", "point spread function at one field point"), ("mtf", "MTF and cutoffs")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--angle", type=ANGLE, default=0.0)
        p.add_argument("--lambda", dest="wavelength", type=LENGTH, default=None)
        p.add_argument("--z0", type=DISTANCE, default=None, help="object distance (default: focused plane); 'inf' allowed")
        p.add_argument("--n", type=int, default=1024)
        p.add_argument("--pitch", type=LENGTH, default=None, help="sensor sample pitch")
        if name == "psf":
            p.add_argument("--method", choices=("pupil", "chain"), default="pupil")
            p.add_argument("--crop", type=int, default=None)

    p = sub.add_parser("spot", parents=[common], help="geometric spot diagrams over field angles")
    p.add_argument("--angles", type=ANGLE, nargs="+", default=[parse_angle(f"{a}deg") for a in np.arange(0, 3.01, 0.5)])
    p.add_argument("--rays", type=int, default=4096)
    p.add_argument("--lambda", dest="wavelength", type=LENGTH, default=None)

    p = sub.add_parser("tolerance", parents=[common], help="mean Strehl under one perturbation")
    p.add_argument("--element", choices=("objective", "eyepiece", "sensor"), default="eyepiece")
    p.add_argument("--dof", choices=("lateral-x", "lateral-y", "longitudinal-z", "tilt-x", "tilt-y"), default="lateral-x")
    p.add_argument("--max", dest="max_mag", default="0.04mm", help="largest perturbation (length or angle)")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--compare-refractive", action="store_true")

    p = sub.add_parser("zoom", parents=[common], help="separations for target EFLs")
    p.add_argument("--efl", type=LENGTH, nargs="+", required=True)
    p.add_argument("--zref", type=LENGTH, default=parse_length("673mm"))

    p = sub.add_parser("focus", parents=[common], help="sensor distance for object distances")
    p.add_argument("--z0", type=LENGTH, nargs="+", required=True)

    p = sub.add_parser("hyperfocal", parents=[common], help="diffraction-aware hyperfocal distance")
    p.add_argument("--epd", type=LENGTH, required=True)
    p.add_argument("--efl", type=LENGTH, required=True)
    p.add_argument("--lambda", dest="wavelength", type=LENGTH, required=True)
    p.add_argument("--pitch", type=LENGTH, required=True)

    p = sub.add_parser("layout", parents=[common], help="nanocell layout synthesis")
    p.add_argument("--lut", type=Path, default=None, help="LUT CSV (default: packaged synthetic LUT)")
    p.add_argument("--pitch", type=LENGTH, default=None)
    p.add_argument("--csv", action="store_true", help="also write a CSV of cell radii")

    p = sub.add_parser("render", parents=[common], help="structure image and color cue of one scene")
    p.add_argument("--scene", type=Path, required=True)
    _sensor_flags(p)

    p = sub.add_parser("dataset", parents=[common], help="paired dataset from a scene directory")
    p.add_argument("--scenes", type=Path, default=None, help="scene directory (default: packaged textures)")
    p.add_argument("--count", type=int, default=10)
    _sensor_flags(p)

    p = sub.add_parser("rapsd", parents=[common], help="radially averaged power spectral density")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--pitch", type=LENGTH, default=None)
    p.add_argument("--channel", type=int, default=None, help="channel of a color image (default: mean)")
    return parser


class _Run:
    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.out = args.out if args.out is not None else Path("runs") / args.command
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.summary: dict = {}

    def geometry(self):
        cfg = load_config(self.args.config)
        path = Path(self.args.config)
        if path.exists():
            self.inputs[str(path)] = fileio.sha256_file(path)
        return cfg, geometry_from_config(cfg)

    def add_input(self, path: Path):
        self.inputs[str(path)] = fileio.sha256_file(path) if path.is_file() else "directory"

    def write(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def manifest(self, geom_dict=None):
        args = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(self.args).items()}
        return {
            "tool": "hybridtele",
            "version": __version__,
            "subcommand": self.args.command,
            "argv": self.argv,
            "arguments": args,
            "seed": self.args.seed,
            "geometry": geom_dict,
            "inputs": self.inputs,
            "outputs": {p.name: fileio.sha256_file(p) for p in self.outputs if p.is_file()},
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }


def _focused_z0(geom, z0):
    from .design import _focus_object

    return _focus_object(geom) if z0 is None else z0


def cmd_design(run: _Run):
    from .design import DesignConstraints, optimize_design

    cfg, geom = run.geometry()
    lim = design_limits(cfg)
    a = run.args
    cons = DesignConstraints(
        strehl_floor=a.strehl_floor if a.strehl_floor is not None else lim["strehl_off_axis"],
        cutoff_floor_lpmm=a.cutoff if a.cutoff is not None else lim["mtf_cutoff_lpmm"],
        angle_max_deg=a.angle_max if a.angle_max is not None else lim["max_field_angle_deg"],
        track_budget=a.track_budget if a.track_budget is not None else lim["max_separation_sum"],
        lambda0=geom.lambda0,
        min_focus_distance=lim["min_focus_distance"],
        nanocell_pitch=lim["nanocell_pitch"],
    )
    res = optimize_design(geom, cons, maxiter=a.maxiter, restarts=a.restarts, seed=a.seed)
    fileio.write_json(run.write(run.out / "design_report.json"), res.to_dict())
    fileio.write_csv(run.write(run.out / "history.csv"), ["step", "telephoto_ratio"],
                     [np.arange(len(res.history)), np.array(res.history)])
    run.summary = {
        "telephoto_ratio": res.telephoto_ratio,
        "initial_ratio": res.initial_ratio,
        "feasible": res.report.feasible,
        "m_sep_mm": res.geometry.m_sep * 1e3,
        "s_sep_mm": res.geometry.s_sep * 1e3,
        "message": res.message,
    }
    return res.geometry


def _psf_for_args(run: _Run, **extra):
    from .system import psf

    _, geom = run.geometry()
    a = run.args
    lam = a.wavelength if a.wavelength is not None else geom.lambda0
    z0 = _focused_z0(geom, a.z0)
    p = psf(geom, z0, lam, field_angle=a.angle, n=a.n, pitch=a.pitch, **extra)
    return geom, p, z0, lam


def cmd_psf(run: _Run):
    from .system import write_psf_stack

    a = run.args
    geom, p, z0, lam = _psf_for_args(run, method=a.method, crop=a.crop)
    write_psf_stack(run.out, [p])
    run.outputs += [run.out / "psf_000.pfm", run.out / "index.json"]
    run.summary = {
        "strehl": p.strehl,
        "centroid_um": [p.centroid[0] * 1e6, p.centroid[1] * 1e6],
        "pitch_um": p.pitch * 1e6,
        "wavelength_nm": lam * 1e9,
        "field_angle_deg": a.angle,
        "z0_m": z0,
        "method": p.method,
    }
    fileio.write_json(run.write(run.out / "psf.json"), run.summary)
    return geom


def cmd_mtf(run: _Run):
    from .system import mtf, write_mtf_csv

    a = run.args
    geom, p, z0, lam = _psf_for_args(run, with_strehl=True)
    curve = mtf(p)
    write_mtf_csv(run.write(run.out / "mtf.csv"), curve)
    run.summary = {
        "cutoff_design_lpmm": curve.cutoff_design_lpmm,
        "design_threshold": curve.design_threshold,
        "cutoff_0.2_lpmm": curve.cutoff_02_lpmm,
        "strehl": p.strehl,
        "wavelength_nm": lam * 1e9,
        "field_angle_deg": a.angle,
        "z0_m": z0,
    }
    fileio.write_json(run.write(run.out / "mtf.json"), run.summary)
    return geom


def cmd_spot(run: _Run):
    from .system import spot_trace, write_spot_csv

    _, geom = run.geometry()
    a = run.args
    rms = []
    for ang in a.angles:
        sp = spot_trace(geom, ang, a.rays, wavelength=a.wavelength)
        write_spot_csv(run.write(run.out / f"spot_{ang:.3f}deg.csv"), sp)
        rms.append(sp.rms)
    fileio.write_csv(run.write(run.out / "spot_rms.csv"), ["angle_deg", "rms_um"], [np.array(a.angles), np.array(rms) * 1e6])
    run.summary = {"angles_deg": list(a.angles), "rms_um": [r * 1e6 for r in rms]}
    return geom


def cmd_tolerance(run: _Run):
    from .design import PerturbationSpec, matched_refractive, tolerance_sweep

    _, geom = run.geometry()
    a = run.args
    kind = a.dof.split("-")[0]
    spec = PerturbationSpec(a.element, a.dof, a.max_value, a.samples)
    curve = tolerance_sweep(geom, spec, n=a.n, workers=a.workers)
    cols = [curve.magnitudes * (1.0 if kind == "tilt" else 1e3), curve.mean_strehl]
    header = ["magnitude_" + ("deg" if kind == "tilt" else "mm"), "mean_strehl"]
    run.summary = {"magnitudes": cols[0].tolist(), "mean_strehl": curve.mean_strehl.tolist()}
    if a.compare_refractive:
        ref = matched_refractive(geom)
        rc = tolerance_sweep(ref, spec, n=a.n, workers=a.workers, z0=_focused_z0(geom, None))
        cols.append(rc.mean_strehl)
        header.append("mean_strehl_refractive")
        run.summary["mean_strehl_refractive"] = rc.mean_strehl.tolist()
    fileio.write_csv(run.write(run.out / "tolerance.csv"), header, cols)
    fileio.write_json(run.write(run.out / "tolerance.json"), run.summary)
    return geom


def cmd_zoom(run: _Run):
    from .design import zoom_solve

    _, geom = run.geometry()
    a = run.args
    rows = []
    for efl in a.efl:
        m, s = zoom_solve(geom, efl, z_ref=a.zref)
        g = geom.replace(m_sep=m, s_sep=s)
        rows.append({"efl_mm": efl * 1e3, "m_sep_mm": m * 1e3, "s_sep_mm": s * 1e3, "telephoto_ratio": g.telephoto_ratio})
    run.summary = {"z_ref_m": a.zref, "configurations": rows}
    fileio.write_json(run.write(run.out / "zoom.json"), run.summary)
    return geom


def cmd_focus(run: _Run):
    from .design import autofocus_solve

    _, geom = run.geometry()
    rows = [{"z0_m": z, "s_sep_mm": autofocus_solve(geom, z) * 1e3} for z in run.args.z0]
    run.summary = {"focus": rows}
    fileio.write_json(run.write(run.out / "focus.json"), run.summary)
    return geom


def cmd_hyperfocal(run: _Run):
    from .design import hyperfocal

    a = run.args
    h = hyperfocal(a.epd, a.efl, a.wavelength, a.pitch)
    run.summary = {
        "f_number": h.f_number,
        "airy_diameter_um": h.airy_diameter * 1e6,
        "circle_of_confusion_um": h.circle_of_confusion * 1e6,
        "pixel_limited": h.pixel_limited,
        "hyperfocal_m": h.hyperfocal,
        "near_limit_m": h.near_limit,
    }
    fileio.write_json(run.write(run.out / "hyperfocal.json"), run.summary)
    return None


def cmd_layout(run: _Run):
    from .metasurface import NanocellLut, default_lut, layout_to_realized_modulation, synthesize_layout

    _, geom = run.geometry()
    a = run.args
    if a.lut is not None:
        run.add_input(a.lut)
        lut = NanocellLut.from_csv(a.lut)
    else:
        lut = default_lut()
    lay = synthesize_layout(geom.profile, lut, geom.eyepiece_diameter, pitch=a.pitch, workers=a.workers)
    lay.write_binary(run.write(run.out / "layout.bin"))
    if a.csv:
        lay.write_csv(run.write(run.out / "layout.csv"))
    real = layout_to_realized_modulation(lay, lut)
    prov = lay.provenance()
    prov.update({"lut_synthetic": lut.synthetic, "power_fraction": real.power_fraction()})
    fileio.write_json(run.write(run.out / "layout_provenance.json"), prov)
    run.summary = {"cells": int(lay.occupied.sum()), "m": lay.m, "pitch_nm": lay.pitch * 1e9,
                   "lut_synthetic": lut.synthetic, "power_fraction": real.power_fraction()}
    return geom


def _sensor(run: _Run):
    from .imaging import SensorModel

    a = run.args
    return SensorModel.default(
        band_center_nm=a.band_center * 1e9, band_fwhm_nm=a.band_fwhm * 1e9,
        exposure_structure=a.exposure, exposure_color=a.exposure_color,
        gain=a.gain, read_noise=a.read_noise,
    )


def _imaging_geometry(run: _Run):
    from .design import autofocus_solve

    _, geom = run.geometry()
    if not run.args.no_autofocus:
        geom = geom.replace(s_sep=autofocus_solve(geom, run.args.depth, wavelength=run.args.band_center))
    return geom


def cmd_render(run: _Run):
    from .imaging import SceneSpec, ground_truth, render_pair

    a = run.args
    geom = _imaging_geometry(run)
    sensor = _sensor(run)
    run.add_input(a.scene)
    scene = SceneSpec.from_file(a.scene, a.depth)
    pair = render_pair(scene, geom, sensor, a.seed, noise=not a.no_noise, shift_variant=a.shift_variant, workers=a.workers)
    gt = ground_truth(scene, geom, sensor)
    for name, img in (("structure", pair.structure), ("color", pair.color), ("gt", gt)):
        fileio.write_pfm(run.write(run.out / f"{name}.pfm"), img.astype(np.float32))
        png = run.write(run.out / f"{name}.png")
        fileio.write_png16(png, img)
        run.write(png.with_suffix(".png.json"))
    run.summary = {"structure_mean_dn": float(pair.structure.mean()),
                   "color_mean_dn": pair.color.mean(axis=(0, 1)).tolist(),
                   "s_sep_mm": geom.s_sep * 1e3, "metadata": pair.metadata}
    return geom


def cmd_dataset(run: _Run):
    from importlib import resources

    from .imaging import generate_dataset

    a = run.args
    geom = _imaging_geometry(run)
    sensor = _sensor(run)
    if a.scenes is not None:
        scenes = a.scenes
        if not scenes.is_dir():
            raise UsageError(f"--scenes {scenes} is not a directory")
        run.add_input(scenes)
        man = generate_dataset(scenes, run.out, geom, sensor, a.count, a.seed, depth=a.depth,
                               noise=not a.no_noise, workers=a.workers)
    else:
        with resources.as_file(resources.files("hybridtele.data").joinpath("textures")) as scenes:
            man = generate_dataset(scenes, run.out, geom, sensor, a.count, a.seed, depth=a.depth,
                                   noise=not a.no_noise, workers=a.workers)
    run.outputs.append(run.out / "manifest.json")
    ok = sum(1 for it in man["items"] if it.get("status") == "ok")
    run.summary = {"items": len(man["items"]), "ok": ok, "skipped": len(man["items"]) - ok}
    return geom


def cmd_rapsd(run: _Run):
    from .imaging import rapsd, write_rapsd_csv

    a = run.args
    run.add_input(a.image)
    img = fileio.read_image(a.image)
    if img.ndim == 3:
        img = img[..., a.channel] if a.channel is not None else img.mean(axis=-1)
    curve = rapsd(img, a.pitch)
    write_rapsd_csv(run.write(run.out / "rapsd.csv"), curve)
    run.summary = {"bins": int(curve.radius.size), "total_power": curve.total_power,
                   "parseval_reference": float(np.sum(img**2))}
    return None


COMMANDS = {
    "design": cmd_design, "psf": cmd_psf, "mtf": cmd_mtf, "spot": cmd_spot, "tolerance": cmd_tolerance,
    "zoom": cmd_zoom, "focus": cmd_focus, "hyperfocal": cmd_hyperfocal, "layout": cmd_layout,
    "render": cmd_render, "dataset": cmd_dataset, "rapsd": cmd_rapsd,
}


def _print_summary(run: _Run, as_json: bool) -> None:
    if as_json:
        print(json.dumps({"command": run.args.command, "out": str(run.out), **run.summary}, sort_keys=True, default=str))
        return
    for key, val in run.summary.items():
        if isinstance(val, float):
            text = f"{val:.6g}"
            print(f"{key}: {text if any(ch in text for ch in '.ein') else text + '.0'}")
        else:
            print(f"{key}: {val}")
    print(f"artifacts: {run.out}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    as_json = bool(getattr(args, "json", False))
    run = _Run(args, argv)
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        for attr in ("scene", "image", "lut"):
            path = getattr(args, attr, None)
            if path is not None and not Path(path).is_file():
                raise UsageError(f"--{attr} {path} does not exist")
        if args.command == "tolerance":
            try:
                tilt = args.dof.startswith("tilt")
                args.max_value = parse_angle(args.max_mag) if tilt else parse_length(args.max_mag)
            except ValueError as exc:
                raise UsageError(f"--max: {exc}") from None
        run.out.mkdir(parents=True, exist_ok=True)
        geom = COMMANDS[args.command](run)
        fileio.write_json(run.out / "run_manifest.json", run.manifest(None if geom is None else geom.to_dict()))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hybridtele: error: {exc}", file=sys.stderr)
        return 2
    except (HybridTeleError, ValueError, OSError) as exc:
        err = exc.to_dict() if isinstance(exc, HybridTeleError) else {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err, sort_keys=True) if as_json else f"hybridtele: {err['error']}: {err['message']}", file=sys.stderr)
        return 1
    _print_summary(run, as_json)
    return 0


if __name__ == "__main__":
    sys.exit(main())
