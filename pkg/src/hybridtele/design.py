"""Telephoto design optimization, tolerancing, focus/zoom solvers and hyperfocal.

The optimizer minimizes the telephoto ratio ``TTL / EFL`` over the seven
even-order phase coefficients and the two separations, subject to image
quality and packaging constraints, with an exterior quadratic penalty
annealed over three stages of Nelder-Mead simplex descent.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import (
    AfocalError,
    DegenerateConjugateError,
    HybridTeleError,
    InfeasibleStartError,
    NoRootError,
    OutOfRangeError,
)
from .metasurface import PhaseProfile, fit_quadratic, max_phase_gradient
from .system import (
    LensModel,
    SystemGeometry,
    focal_plane,
    mtf,
    paraxial_coefficients,
    psf,
    residual_defocus,
)

N_COEFFS = 7
ZOOM_RANGE = (20e-3, 50e-3)
REFERENCE_DISTANCE = 0.673
BK7_INDEX = 1.5168


@dataclass(frozen=True)
class DesignConstraints:
    """Constraint set of the telephoto design problem.

    Besides the Strehl floor ``C`` and cutoff floor ``f_N`` over the angle
    grid, every design must fit the separation budget ``m + s <= s_M``,
    have its stop filled by the objective beam, keep the metasurface phase
    gradient within what the nanocell pitch can sample, and focus a real
    object no closer than ``min_focus_distance``.
    """

    strehl_floor: float = 0.13
    cutoff_floor_lpmm: float = 250.0
    angle_max_deg: float = 3.0
    track_budget: float = 12.7e-3
    lambda0: float = 532e-9
    n_angles: int = 7
    min_focus_distance: float = REFERENCE_DISTANCE
    nanocell_pitch: float = 300e-9

    def __post_init__(self):
        if not 0.0 <= self.strehl_floor <= 1.0:
            raise ValueError("strehl_floor must lie in [0, 1]")
        if self.cutoff_floor_lpmm < 0 or self.angle_max_deg <= 0 or self.track_budget <= 0:
            raise ValueError("cutoff floor must be >= 0 and angle_max, track_budget > 0")

    @property
    def angles(self) -> np.ndarray:
        return np.linspace(0.0, self.angle_max_deg, self.n_angles)

    @property
    def max_gradient(self) -> float:
        """Largest phase gradient (rad/m) sampled by two cells per period."""
        return 2.0 * math.pi / (2.0 * self.nanocell_pitch)


@dataclass
class ConstraintReport:
    """Margins (positive means satisfied) at each sampled angle."""

    angles_deg: list[float]
    strehl: list[float]
    cutoff_lpmm: list[float]
    margins: dict[str, list[float]]
    feasible: bool

    def to_dict(self) -> dict:
        return {
            "angles_deg": self.angles_deg,
            "strehl": self.strehl,
            "cutoff_lpmm": self.cutoff_lpmm,
            "margins": self.margins,
            "feasible": self.feasible,
        }


@dataclass
class DesignResult:
    geometry: SystemGeometry
    telephoto_ratio: float
    report: ConstraintReport
    history: list[float]
    converged: bool
    message: str
    evaluations: int
    initial_ratio: float
    stages: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "telephoto_ratio": self.telephoto_ratio,
            "initial_ratio": self.initial_ratio,
            "report": self.report.to_dict(),
            "history": self.history,
            "converged": self.converged,
            "message": self.message,
            "evaluations": self.evaluations,
            "stages": self.stages,
        }


def _focus_object(geom: SystemGeometry) -> float:
    """Object distance used to judge image quality: the focused plane."""
    zf = focal_plane(geom, geom.lambda0)
    return math.inf if zf <= 0 or math.isinf(zf) else zf


def constraint_report(geom: SystemGeometry, cons: DesignConstraints, *, n: int = 1024) -> ConstraintReport:
    """Wave-optics evaluation of every constraint, from scratch.

    Strehl is computed at each angle of the grid with the source on the
    focused object plane; the cutoff is read from the MTF at each angle.
    """
    margins: dict[str, list[float]] = {}
    try:
        zf = focal_plane(geom, cons.lambda0)
        inv_zf = 0.0 if math.isinf(zf) else 1.0 / zf
    except AfocalError:
        inv_zf = math.inf
    z0 = _focus_object(geom) if math.isfinite(inv_zf) else math.inf
    strehls, cutoffs = [], []
    for a in cons.angles:
        try:
            p = psf(geom, z0, cons.lambda0, field_angle=float(a), n=n)
            strehls.append(p.strehl)
            cutoffs.append(mtf(p).cutoff_design_lpmm)
        except HybridTeleError:
            strehls.append(0.0)
            cutoffs.append(0.0)
    margins["strehl"] = [s - cons.strehl_floor for s in strehls]
    margins["cutoff_lpmm"] = [c - cons.cutoff_floor_lpmm for c in cutoffs]
    margins["track_budget_m"] = [cons.track_budget - (geom.m_sep + geom.s_sep)]
    g = abs(1.0 - geom.m_sep / geom.f1)
    margins["stop_fill_m"] = [geom.objective_aperture * g - geom.eyepiece_diameter]
    grad = max_phase_gradient(geom.profile, geom.eyepiece_diameter)
    margins["phase_gradient_rad_per_m"] = [cons.max_gradient - grad]
    margins["focus_inv_m"] = [inv_zf, 1.0 / cons.min_focus_distance - inv_zf]
    feasible = all(v >= 0 for vals in margins.values() for v in vals)
    return ConstraintReport(
        [float(a) for a in cons.angles], [float(s) for s in strehls], [float(c) for c in cutoffs],
        {k: [float(v) for v in vals] for k, vals in margins.items()}, feasible,
    )


class _Problem:
    """Scaled design vector and fast proxy metrics.

    The coefficient variables are the edge phases ``k0 c_i R^(2i)`` (rad) of
    each polynomial term, so all nine variables have comparable leverage.
    """

    def __init__(self, init: SystemGeometry, cons: DesignConstraints, margin: float):
        self.init = init
        self.cons = cons
        self.margin = margin
        self.R = init.eyepiece_diameter / 2.0
        self.k0 = 2.0 * math.pi / init.lambda0
        coeffs = init.profile.to_polynomial(N_COEFFS).coefficients
        coeffs = tuple(coeffs) + (0.0,) * (N_COEFFS - len(coeffs))
        edge = [self.k0 * c * self.R ** (2 * (i + 1)) for i, c in enumerate(coeffs)]
        self.x0 = np.array(edge + [init.m_sep * 1e3, init.s_sep * 1e3])
        self.step = np.array([5.0] + [0.5] * (N_COEFFS - 1) + [0.05, 0.05])
        # Gauss-Legendre nodes in u = (r/R)^2 for the radial Strehl proxy
        nodes, weights = np.polynomial.legendre.leggauss(96)
        self.u = 0.5 * (nodes + 1.0)
        self.w = 0.5 * weights
        self.evaluations = 0

    def geometry(self, z: np.ndarray) -> SystemGeometry:
        x = self.x0 + z * self.step
        coeffs = tuple(float(x[i] / (self.k0 * self.R ** (2 * (i + 1)))) for i in range(N_COEFFS))
        prof = PhaseProfile.polynomial(coeffs, self.init.lambda0)
        return self.init.replace(profile=prof, m_sep=float(x[-2] * 1e-3), s_sep=float(x[-1] * 1e-3))

    def metrics(self, geom: SystemGeometry) -> dict | None:
        """Proxy metrics; ``None`` when the geometry cannot be evaluated."""
        self.evaluations += 1
        cons = self.cons
        if not (0 < geom.m_sep < geom.f1 and geom.s_sep > 0):
            return None
        try:
            fit = fit_quadratic(geom.profile, geom.eyepiece_diameter)
            zf = focal_plane(geom, cons.lambda0)
        except (AfocalError, ValueError, ZeroDivisionError):
            return None
        inv_zf = 0.0 if math.isinf(zf) else 1.0 / zf
        z0 = math.inf if inv_zf <= 0 else zf
        try:
            a2 = paraxial_coefficients(geom, z0).A2
        except DegenerateConjugateError:
            return None
        r = self.R * np.sqrt(self.u)
        w = 0.5 * self.k0 * (1.0 / geom.s_sep + a2) * r * r + geom.profile.radial(r)
        strehl = float(abs(np.sum(self.w * np.exp(1j * (w - np.sum(self.w * w))))) ** 2)
        # PSF isoplanatism of the thin-element model: one value serves the grid
        cutoff = self._cutoff_proxy(geom, z0)
        grad = max_phase_gradient(geom.profile, geom.eyepiece_diameter, samples=129)
        g = abs(1.0 - geom.m_sep / geom.f1)
        m = self.margin
        viol = {
            "strehl": max(0.0, cons.strehl_floor * (1 + m) - strehl) / max(cons.strehl_floor, 1e-3),
            "cutoff": max(0.0, cons.cutoff_floor_lpmm * (1 + m) - cutoff) / max(cons.cutoff_floor_lpmm, 1.0),
            "track": max(0.0, geom.m_sep + geom.s_sep - cons.track_budget * (1 - m)) / cons.track_budget,
            "stop": max(0.0, geom.eyepiece_diameter * (1 + m) - geom.objective_aperture * g) / geom.eyepiece_diameter,
            "gradient": max(0.0, grad - cons.max_gradient * (1 - m)) / cons.max_gradient,
            "focus_far": max(0.0, -inv_zf) * cons.min_focus_distance,
            "focus_near": max(0.0, inv_zf - (1 - m) / cons.min_focus_distance) * cons.min_focus_distance,
        }
        return {
            "ratio": geom.telephoto_ratio,
            "strehl": strehl,
            "cutoff": cutoff,
            "fit_rms": fit.rms_residual,
            "violations": viol,
            "feasible": all(v == 0.0 for v in viol.values()),
        }

    def _cutoff_proxy(self, geom: SystemGeometry, z0: float) -> float:
        try:
            p = psf(geom, z0, self.cons.lambda0, n=256, with_strehl=False)
        except HybridTeleError:
            return 0.0
        return mtf(p).cutoff_design_lpmm


def optimize_design(
    init: SystemGeometry,
    constraints: DesignConstraints | None = None,
    *,
    penalties=(1e1, 1e3, 1e5),
    maxiter: int = 800,
    restarts: int = 0,
    proxy_margin: float = 0.01,
    verify_n: int = 1024,
    seed: int = 0,
) -> DesignResult:
    """Minimize the telephoto ratio subject to ``constraints``.

    Parameters
    ----------
    init : SystemGeometry
        Starting design. Any profile kind is accepted; it is converted to
        the seven-term even polynomial.
    constraints : DesignConstraints
    penalties : sequence of float
        Penalty weights of the annealed stages.
    maxiter : int
        Simplex iterations per stage.
    restarts : int
        Extra simplex restarts from the best point of the last stage,
        with the initial simplex directions permuted by ``seed``.
    proxy_margin : float
        Relative tightening of every constraint in the proxy model so the
        wave-optics verification has headroom.
    verify_n : int
        FFT size of the final wave-optics verification.

    Returns
    -------
    DesignResult
        ``history`` holds the best feasible ratio after each improvement,
        so it is non-increasing.

    Raises
    ------
    InfeasibleStartError
        If the metrics of ``init`` cannot be evaluated.
    """
    cons = constraints or DesignConstraints(lambda0=init.lambda0)
    prob = _Problem(init, cons, proxy_margin)
    init_geom = prob.geometry(np.zeros(prob.x0.size))
    first = prob.metrics(init_geom)
    if first is None:
        raise InfeasibleStartError("initial geometry cannot be evaluated (afocal or degenerate)")
    initial_ratio = init.telephoto_ratio
    candidates: list[tuple[float, np.ndarray]] = []
    history: list[float] = []
    if first["feasible"]:
        candidates.append((first["ratio"], np.zeros(prob.x0.size)))
        history.append(first["ratio"])

    def objective(z, mu):
        geom = prob.geometry(z)
        met = prob.metrics(geom)
        if met is None:
            return 1e6
        if met["feasible"] and (not candidates or met["ratio"] < candidates[-1][0]):
            candidates.append((met["ratio"], z.copy()))
            history.append(met["ratio"])
        return met["ratio"] + mu * sum(v * v for v in met["violations"].values())

    rng = np.random.default_rng(seed)
    z = np.zeros(prob.x0.size)
    stages = []
    converged = True
    runs = [(mu, None) for mu in penalties] + [(penalties[-1], rng.permutation(prob.x0.size)) for _ in range(restarts)]
    for mu, perm in runs:
        dim = z.size
        simplex = np.vstack([z] + [z + np.eye(dim)[i if perm is None else perm[i]] for i in range(dim)])
        res = optimize.minimize(
            objective, z, args=(mu,), method="Nelder-Mead",
            options={"maxiter": maxiter, "initial_simplex": simplex, "xatol": 1e-4, "fatol": 1e-7},
        )
        z = res.x
        stages.append({"penalty": mu, "fun": float(res.fun), "iterations": int(res.nit), "success": bool(res.success)})
        converged = bool(res.success)
    if not candidates:
        raise InfeasibleStartError("no feasible iterate found; relax the constraints or change the start")
    # wave-optics verification, falling back to earlier feasible iterates
    for ratio, zc in reversed(candidates):
        geom = prob.geometry(zc) if np.any(zc) else init
        report = constraint_report(geom, cons, n=verify_n)
        if report.feasible:
            msg = "converged" if converged else "iteration limit reached; returning best verified feasible iterate"
            return DesignResult(geom, geom.telephoto_ratio, report, history, converged, msg,
                                prob.evaluations, initial_ratio, stages)
    report = constraint_report(init, cons, n=verify_n)
    return DesignResult(init, initial_ratio, report, history, False,
                        "no iterate passed wave-optics verification; returning the initial geometry",
                        prob.evaluations, initial_ratio, stages)


DOFS = ("lateral-x", "lateral-y", "longitudinal-z", "tilt-x", "tilt-y")
ELEMENTS = ("objective", "eyepiece", "sensor")
MAX_LATERAL = 0.1e-3
MAX_TILT_DEG = 1.0
MAX_LONGITUDINAL = 0.5e-3


@dataclass(frozen=True)
class PerturbationSpec:
    """One-parameter perturbation sweep.

    Magnitudes are meters for lateral and longitudinal moves and degrees
    for tilts; ``samples`` values are spaced evenly from ``start`` to
    ``stop``.
    """

    element: str
    dof: str
    stop: float
    samples: int = 9
    start: float = 0.0

    def __post_init__(self):
        if self.element not in ELEMENTS:
            raise ValueError(f"element must be one of {ELEMENTS}")
        if self.dof not in DOFS:
            raise ValueError(f"dof must be one of {DOFS}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        limit = {"lateral": MAX_LATERAL, "longitudinal": MAX_LONGITUDINAL, "tilt": MAX_TILT_DEG}[self.dof.split("-")[0]]
        for v in (self.start, self.stop):
            if abs(v) > limit * (1 + 1e-12):
                raise OutOfRangeError(
                    f"|{self.dof}| = {abs(v):g} exceeds the small-perturbation validity limit {limit:g}"
                )

    @property
    def magnitudes(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.samples)


def perturb(geom: SystemGeometry, element: str, dof: str, magnitude: float) -> SystemGeometry:
    """Geometry with one element displaced (sensor tilt handled per field point)."""
    kind, _, axis = dof.partition("-")
    idx = 0 if axis == "x" else 1
    if kind == "lateral":
        vec = [0.0, 0.0]
        vec[idx] = magnitude
        if element == "objective":
            return geom.replace(objective_decenter=tuple(np.add(geom.objective_decenter, vec)))
        if element == "eyepiece":
            return geom.replace(eyepiece_decenter=tuple(np.add(geom.eyepiece_decenter, vec)))
        return geom
    if kind == "longitudinal":
        if element == "objective":
            return geom.replace(m_sep=geom.m_sep + magnitude)
        if element == "eyepiece":
            return geom.replace(m_sep=geom.m_sep + magnitude, s_sep=geom.s_sep - magnitude)
        return geom.replace(s_sep=geom.s_sep + magnitude)
    vec = [0.0, 0.0]
    vec[idx] = math.radians(magnitude)
    if element == "objective":
        return geom.replace(objective_tilt=tuple(np.add(geom.objective_tilt, vec)))
    if element == "eyepiece":
        return geom.replace(eyepiece_tilt=tuple(np.add(geom.eyepiece_tilt, vec)))
    return geom


@dataclass
class ToleranceCurve:
    element: str
    dof: str
    magnitudes: np.ndarray
    mean_strehl: np.ndarray
    angles_deg: np.ndarray
    strehl: np.ndarray

    @property
    def drop(self) -> np.ndarray:
        return self.mean_strehl[0] - self.mean_strehl


def tolerance_sweep(
    geom: SystemGeometry,
    spec: PerturbationSpec,
    *,
    angle_max_deg: float = 3.0,
    n_angles: int = 13,
    n: int = 512,
    z0: float | None = None,
    wavelength: float | None = None,
    workers: int = 1,
) -> ToleranceCurve:
    """Mean Strehl over a symmetric field grid for each perturbation size.

    The object stays on the nominal focused plane while elements move.
    """
    lam = geom.lambda0 if wavelength is None else wavelength
    z0 = _focus_object(geom) if z0 is None else z0
    angles = np.linspace(-angle_max_deg, angle_max_deg, n_angles)
    # image height per unit tan(theta) on the sensor
    height_per_slope = -geom.s_sep * paraxial_coefficients(geom, z0).lateral_gain

    def strehl_at(args):
        mag, theta = args
        g = perturb(geom, spec.element, spec.dof, mag)
        if spec.element == "sensor" and spec.dof.startswith("tilt"):
            # the grid runs along x, so only a tilt about y changes the local focus
            if spec.dof.endswith("x"):
                height = math.tan(math.radians(theta)) * height_per_slope
                g = g.replace(s_sep=g.s_sep + height * math.tan(math.radians(mag)))
        return psf(g, z0, lam, field_angle=float(theta), n=n).strehl

    jobs = [(float(mg), float(a)) for mg in spec.magnitudes for a in angles]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            vals = list(ex.map(strehl_at, jobs))
    else:
        vals = [strehl_at(j) for j in jobs]
    table = np.array(vals).reshape(spec.samples, n_angles)
    return ToleranceCurve(spec.element, spec.dof, spec.magnitudes, table.mean(axis=1), angles, table)


def matched_refractive(geom: SystemGeometry, n_index: float = BK7_INDEX, *, refocus: bool = True) -> SystemGeometry:
    """Same system with a single-surface refractive eyepiece of equal power.

    The lens has radius ``R = (n - 1) f2``. With ``refocus`` the sensor
    distance is set to the best focus of its exact spherical phase (its
    best-fit quadratic power), so the comparison starts from focus.
    """
    lens = LensModel.matched(geom.f2, n_index)
    out = geom.replace(refractive_eyepiece=lens, realized=None)
    if not refocus:
        return out
    r = np.linspace(0.0, geom.eyepiece_diameter / 2.0, 257)
    k0 = 2.0 * math.pi / geom.lambda0
    sag_phase = -k0 * (n_index - 1.0) * lens.R * (1.0 - np.sqrt(1.0 - (r / lens.R) ** 2))
    u = r * r
    # least-squares quadratic in r^2 with uniform pupil weighting (weight r dr)
    a = np.vstack([np.ones_like(u), u]).T * np.sqrt(r)[:, None]
    coef = np.linalg.lstsq(a, sag_phase * np.sqrt(r), rcond=None)[0]
    f_fit = -k0 / (2.0 * coef[1])
    z0 = _focus_object(geom)
    a2 = paraxial_coefficients(out, z0).A2
    s_new = 1.0 / (1.0 / f_fit - a2)
    return out.replace(s_sep=s_new)


def autofocus_solve(
    geom: SystemGeometry,
    z0: float,
    *,
    wavelength: float | None = None,
    bracket: tuple[float, float] | None = None,
) -> float:
    """Sensor distance ``s`` that zeroes the residual defocus for ``z0``.

    Raises
    ------
    NoRootError
        If ``Delta(s)`` does not change sign over the bracket.
    """
    lam = geom.lambda0 if wavelength is None else wavelength
    lo, hi = bracket or (0.05 * geom.s_sep, 20.0 * geom.s_sep)

    def delta(s):
        return residual_defocus(geom.replace(s_sep=s), z0, lam)

    try:
        d_lo, d_hi = delta(lo), delta(hi)
    except DegenerateConjugateError as exc:
        raise NoRootError(f"defocus undefined in bracket: {exc}", interval=(lo, hi)) from exc
    if not np.sign(d_lo) * np.sign(d_hi) < 0:
        raise NoRootError(
            f"residual defocus does not change sign for s in [{lo * 1e3:.4g}, {hi * 1e3:.4g}] mm",
            interval=(lo, hi),
        )
    s = optimize.brentq(delta, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(delta(s)) * 1e-3 >= 1e-9:
        raise NoRootError("root polish failed to reach |Delta| < 1e-9 / mm", interval=(lo, hi))
    return float(s)


def zoom_solve(
    geom: SystemGeometry,
    target_efl: float,
    *,
    z_ref: float = REFERENCE_DISTANCE,
    wavelength: float | None = None,
) -> tuple[float, float]:
    """Separations giving ``target_efl`` while focused on ``z_ref``.

    ``m`` is found by root-finding on the EFL with ``s`` refocused at each
    trial ``m``; EFL grows with ``m`` toward the objective focal length.

    Raises
    ------
    OutOfRangeError
        If ``target_efl`` lies outside 20-50 mm.
    """
    lo_efl, hi_efl = ZOOM_RANGE
    if not lo_efl * (1 - 1e-12) <= target_efl <= hi_efl * (1 + 1e-12):
        raise OutOfRangeError(f"target EFL {target_efl * 1e3:.4g} mm outside [20, 50] mm")
    f1 = geom.f1

    def s_of(m):
        return autofocus_solve(geom.replace(m_sep=m), z_ref, wavelength=wavelength)

    def err(m):
        return s_of(m) * f1 / (f1 - m) - target_efl

    eps = 1e-6 * f1
    grid = np.linspace(eps, f1 - eps, 400)
    vals = []
    for m in grid:
        try:
            vals.append(err(m))
        except (NoRootError, DegenerateConjugateError, AfocalError):
            vals.append(np.nan)
    vals = np.array(vals)
    ok = np.isfinite(vals[:-1]) & np.isfinite(vals[1:]) & (np.sign(vals[:-1]) != np.sign(vals[1:]))
    if not np.any(ok):
        raise NoRootError("no separation reaches the requested EFL", interval=(eps, f1 - eps))
    i = int(np.nonzero(ok)[0][0])
    m = optimize.brentq(err, grid[i], grid[i + 1], xtol=1e-15)
    return float(m), s_of(m)


@dataclass(frozen=True)
class HyperfocalResult:
    f_number: float
    airy_diameter: float
    circle_of_confusion: float
    pixel_limited: bool
    hyperfocal: float
    near_limit: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def hyperfocal(epd: float, efl: float, wavelength: float, pixel_pitch: float) -> HyperfocalResult:
    """Diffraction-aware hyperfocal distance.

    ``N = efl / epd``, ``d_Airy = 2.44 lambda N``, and the circle of
    confusion is the larger of ``d_Airy`` and the pixel pitch;
    ``H = efl^2 / (N coc)`` with the near limit at ``H / 2``.
    """
    if min(epd, efl, wavelength, pixel_pitch) <= 0:
        raise ValueError("all inputs must be positive")
    n = efl / epd
    airy = 2.44 * wavelength * n
    coc = max(airy, pixel_pitch)
    h = efl * efl / (n * coc)
    return HyperfocalResult(n, airy, coc, pixel_pitch > airy, h, h / 2.0)
