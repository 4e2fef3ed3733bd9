"""Closed-loop evaluation: reference tracks, noisy episodes and tracking metrics.

The synthetic plant is reality; the controller only sees noisy measurements
and plans with the learned model.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import ReferenceTrajectory, Waypoint, fit_cubic_spline, heading_error, wrap_angle
from .plants import GemPlant, GemPlantParams, WarthogPlant, WarthogPlantParams, perturb_params
from .tracking import MpcConfig, MpcController, TrackingWeights, make_platform

log = logging.getLogger(__name__)

SHAPES = ("circle", "oval", "snake", "eight", "combination", "warthog_combination")
DIVERGED_D_E = 20.0  # [m]


@dataclass(frozen=True)
class TrackSpec:
    """Geometry and speed profile of a reference track.

    ``radius`` sets circles, oval ends, the eight's half-width and the final arc of
    combination tracks. Speeds ramp from ``start_speed`` at the rate ``speed_slope``
    (m/s per m) and never change faster than that along the track.
    """

    shape: str
    radius: float = 25.0
    amplitude: float = 3.0
    wavelength: float = 30.0
    length: float = 120.0
    straight: float = 40.0
    cruise_speed: float = 7.0
    section_speeds: tuple[float, ...] = ()
    start_speed: float = 1.5
    speed_slope: float = 0.4
    spacing: float = 2.0
    points: int = 0

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown track shape {self.shape!r}; expected one of {SHAPES}")
        for name in ("radius", "amplitude", "wavelength", "length", "spacing", "speed_slope"):
            if getattr(self, name) <= 0:
                raise ValueError(f"track {name} must be positive")
        if self.straight < 0:
            raise ValueError("track straight length must be nonnegative")
        if self.cruise_speed < 0 or self.start_speed < 0:
            raise ValueError("speeds must be nonnegative")

    @property
    def closed(self) -> bool:
        return self.shape in ("circle", "oval", "eight")


def _speed_profile(xy: np.ndarray, targets: np.ndarray, start: float, slope: float) -> np.ndarray:
    d = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    v = np.array(targets, dtype=float)
    v[0] = min(v[0], start)
    for i in range(1, len(v)):
        v[i] = min(v[i], v[i - 1] + slope * d[i - 1])
    for i in range(len(v) - 2, 0, -1):
        v[i] = min(v[i], v[i + 1] + slope * d[i])
    return v


def _circle_points(spec: TrackSpec) -> np.ndarray:
    n = spec.points or max(16, int(round(2 * math.pi * spec.radius / spec.spacing)))
    a = -math.pi / 2 + 2 * math.pi * np.arange(n) / n
    return np.column_stack([spec.radius * np.cos(a), spec.radius * np.sin(a)])


def _oval_points(spec: TrackSpec) -> np.ndarray:
    R, Ls = spec.radius, spec.length
    perim = 2 * Ls + 2 * math.pi * R
    n = spec.points or max(16, int(round(perim / spec.spacing)))
    s = perim * np.arange(n) / n
    pts = []
    for si in s:
        if si < Ls / 2:
            pts.append((si, -R))
        elif si < Ls / 2 + math.pi * R:
            a = -math.pi / 2 + (si - Ls / 2) / R
            pts.append((Ls / 2 + R * math.cos(a), R * math.sin(a)))
        elif si < 1.5 * Ls + math.pi * R:
            pts.append((Ls / 2 - (si - Ls / 2 - math.pi * R), R))
        elif si < 1.5 * Ls + 2 * math.pi * R:
            a = math.pi / 2 + (si - 1.5 * Ls - math.pi * R) / R
            pts.append((-Ls / 2 + R * math.cos(a), R * math.sin(a)))
        else:
            pts.append((si - 1.5 * Ls - 2 * math.pi * R - Ls / 2, -R))
    return np.array(pts)


def _snake_points(amplitude: float, wavelength: float, length: float, x0: float = 0.0) -> np.ndarray:
    per_wave = 16
    n = int(round(length / wavelength * per_wave))
    x = np.linspace(0.0, length, n + 1)
    return np.column_stack([x0 + x, amplitude * np.sin(2 * math.pi * x / wavelength)])


def _eight_points(spec: TrackSpec) -> np.ndarray:
    a = spec.radius
    n = spec.points or max(32, 2 * int(round(3.0 * 2 * math.pi * a / spec.spacing / 4)))
    t = math.pi / n + 2 * math.pi * np.arange(n) / n
    return np.column_stack([a * np.sin(t), 0.5 * a * np.sin(2 * t)])


def _combination_points(spec: TrackSpec) -> tuple[np.ndarray, np.ndarray]:
    """Straight, then two snake periods, then a left semicircle; plus section labels."""
    Ls, A, lam, R = spec.straight, spec.amplitude, spec.wavelength, spec.radius
    n_st = max(2, int(round(Ls / spec.spacing)))
    straight = np.column_stack([np.linspace(0.0, Ls, n_st + 1), np.zeros(n_st + 1)])
    snake = _snake_points(A, lam, 2 * lam, x0=Ls)[1:]
    x_end = Ls + 2 * lam
    n_arc = max(8, int(round(math.pi * R / spec.spacing)))
    a = -math.pi / 2 + math.pi * np.arange(1, n_arc + 1) / n_arc
    arc = np.column_stack([x_end + R * np.cos(a), R + R * np.sin(a)])
    pts = np.vstack([straight, snake, arc])
    labels = np.concatenate([np.zeros(len(straight)), np.ones(len(snake)), np.full(len(arc), 2)]).astype(int)
    return pts, labels


def generate_track(spec: TrackSpec) -> list[Waypoint]:
    if spec.shape == "circle":
        pts = _circle_points(spec)
        labels = np.zeros(len(pts), dtype=int)
    elif spec.shape == "oval":
        pts = _oval_points(spec)
        labels = np.zeros(len(pts), dtype=int)
    elif spec.shape == "snake":
        pts = _snake_points(spec.amplitude, spec.wavelength, spec.length)
        labels = np.zeros(len(pts), dtype=int)
    elif spec.shape == "eight":
        pts = _eight_points(spec)
        labels = np.zeros(len(pts), dtype=int)
    else:
        pts, labels = _combination_points(spec)
    if spec.section_speeds:
        targets = np.asarray(spec.section_speeds, dtype=float)[np.minimum(labels, len(spec.section_speeds) - 1)]
    else:
        targets = np.full(len(pts), spec.cruise_speed)
    speeds = _speed_profile(pts, targets, spec.start_speed, spec.speed_slope)
    return [Waypoint(float(x), float(y), float(v)) for (x, y), v in zip(pts, speeds)]


DEFAULT_TRACKS = {
    "circle": dict(radius=50.0, cruise_speed=7.0),
    "oval": dict(radius=40.0, length=100.0, cruise_speed=8.0),
    "snake": dict(amplitude=3.0, wavelength=60.0, length=240.0, cruise_speed=8.0),
    "eight": dict(radius=60.0, cruise_speed=7.0),
    "combination": dict(straight=40.0, amplitude=3.0, wavelength=60.0, radius=50.0, section_speeds=(10.0, 8.0, 7.0)),
    "warthog_combination": dict(
        straight=20.0, amplitude=2.0, wavelength=30.0, radius=15.0, section_speeds=(4.0, 3.0, 3.5), spacing=1.0
    ),
}


def default_track(shape: str, **overrides) -> TrackSpec:
    """Bundled scale and speed defaults for each shape (GEM 7-10 m/s, Warthog 3-4 m/s)."""
    if shape not in DEFAULT_TRACKS:
        raise ValueError(f"unknown track shape {shape!r}; expected one of {SHAPES}")
    return TrackSpec(shape=shape, **{**DEFAULT_TRACKS[shape], **overrides})


def build_reference(spec: TrackSpec) -> ReferenceTrajectory:
    return fit_cubic_spline(generate_track(spec), closed=spec.closed)


# -- noise, episodes, metrics ---------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    position_sigma: float = 0.0  # [m]
    heading_sigma: float = 0.0  # [rad]
    velocity_sigma: float = 0.0  # [m/s]
    process_noise: bool = False
    process_sigma: float = 0.02  # [m/s] on plant speed output when process_noise is set
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("position_sigma", "heading_sigma", "velocity_sigma", "process_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def gps(cls, seed: int = 0) -> "NoiseSpec":
        """Measurement noise comparable to a 20-30 cm GNSS/INS unit."""
        return cls(position_sigma=0.25, heading_sigma=0.01, velocity_sigma=0.05, seed=seed)

    @property
    def enabled(self) -> bool:
        return self.position_sigma > 0 or self.heading_sigma > 0 or self.velocity_sigma > 0


@dataclass(frozen=True)
class Metrics:
    ace: float
    mce: float
    ave: float
    mve: float

    def to_dict(self) -> dict[str, float]:
        return {"ace": self.ace, "mce": self.mce, "ave": self.ave, "mve": self.mve}


class EmptyLogError(ValueError):
    pass


def compute_metrics(log_or_d_e, v_e=None, t_start: float = 0.0) -> Metrics:
    """ACE/MCE from |d_e| and AVE/MVE from |v_e| over the logged steps.

    Accepts an episode log mapping (``d_e``, ``v_e``, ``t`` columns) or two arrays.
    """
    if v_e is None:
        log_ = log_or_d_e
        d = np.asarray(log_["d_e"], dtype=float)
        v = np.asarray(log_["v_e"], dtype=float)
        if t_start > 0 and "t" in log_:
            keep = np.asarray(log_["t"], dtype=float) >= t_start
            d, v = d[keep], v[keep]
    else:
        d = np.asarray(log_or_d_e, dtype=float)
        v = np.asarray(v_e, dtype=float)
    if d.size == 0 or v.size == 0:
        raise EmptyLogError("cannot compute metrics of an empty log")
    ad, av = np.abs(d), np.abs(v)
    return Metrics(float(ad.mean()), float(ad.max()), float(av.mean()), float(av.max()))


@dataclass
class EpisodeResult:
    log: dict[str, np.ndarray]
    columns: list[str]
    metrics: Optional[Metrics]
    steps: int
    aborted: bool = False
    reason: str = ""
    completed: bool = False
    solver_warnings: int = 0
    cost_histories: list[list[float]] = field(default_factory=list)

    def metrics_after(self, t_start: float) -> Metrics:
        return compute_metrics(self.log, t_start=t_start)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            cols = [self.log[c] for c in self.columns]
            for row in zip(*cols):
                w.writerow([repr(float(x)) for x in row])


def log_columns(platform) -> list[str]:
    return [
        "t",
        "s",
        "d_e",
        "v_e",
        "theta_e",
        *(f"true_{f}" for f in platform.state_fields),
        *(f"meas_{f}" for f in platform.state_fields),
        *(f"psi_{f}" for f in platform.error_fields),
        *(f"u_{f}" for f in platform.control_fields),
        "iterations",
        "cost",
    ]


PERTURBED_FIELDS = {
    "gem": ("accel_gain", "brake_gain", "drag", "tau_phidot"),
    "warthog": ("tau_v", "tau_w", "slip_gain"),
}


def perturbed_plant_params(platform: str, fraction: float, seed: int, base=None):
    """Plant parameters with every physical field scaled by ``1 +/- fraction`` (random sign per field)."""
    if fraction < 0:
        raise ValueError("perturbation fraction must be nonnegative")
    if base is None:
        base = GemPlantParams() if platform == "gem" else WarthogPlantParams()
    if fraction == 0:
        return base
    rng = np.random.default_rng([seed, 7919])
    fields = PERTURBED_FIELDS[platform]
    signs = rng.choice([-1.0, 1.0], size=len(fields))
    return perturb_params(base, {f: 1.0 + sgn * fraction for f, sgn in zip(fields, signs)})


def _plant_for(platform_name: str, params):
    if platform_name == "gem":
        return GemPlant(params if params is not None else GemPlantParams())
    return WarthogPlant(params if params is not None else WarthogPlantParams())


def run_episode(
    track,
    plant_params,
    learned_model,
    controller_config: MpcConfig | None = None,
    noise: NoiseSpec | None = None,
    duration: float = 60.0,
    platform: str = "gem",
    weights: TrackingWeights | None = None,
    trace=None,
    keep_cost_histories: bool = False,
) -> EpisodeResult:
    """Simulate one closed-loop run at the platform rate.

    ``track`` is a :class:`TrackSpec`, a :class:`ReferenceTrajectory`, or a
    ``(waypoints, closed)`` pair. The episode stops at ``duration``, when the
    vehicle reaches the end of the track (one lap for closed tracks), or when the
    true cross-track error exceeds 20 m.
    """
    if duration <= 0:
        raise EmptyLogError("episode duration must be positive")
    noise = noise or NoiseSpec()
    if isinstance(track, TrackSpec):
        ref = build_reference(track)
    elif isinstance(track, ReferenceTrajectory):
        ref = track
    else:
        waypoints, closed = track
        ref = fit_cubic_spline(waypoints, closed)
    plat = make_platform(platform)
    model_platform = getattr(learned_model, "platform", "")
    if model_platform and model_platform != platform:
        raise ValueError(f"model was trained for {model_platform!r}, episode platform is {platform!r}")
    plant = _plant_for(platform, plant_params)
    dt = plat.dt
    steps = int(math.floor(duration / dt + 1e-9))
    ctl = MpcController(ref, learned_model, weights, controller_config, plat, trace=trace)
    rng = np.random.default_rng(noise.seed)
    columns = log_columns(plat)
    rows: dict[str, list[float]] = {c: [] for c in columns}
    end_s = float(ref.knot_s[-2]) if ref.closed else ref.total_length - 0.5

    state = plat.start_state(ref)
    s_true = 0.0
    progress = 0.0
    aborted = False
    completed = False
    reason = ""
    histories = []
    for k in range(steps):
        meas = _measure(state, noise, rng, plat)
        res = ctl.step(meas)
        if noise.enabled:
            proj = ref.project(state.x, state.y, s_hint=s_true, window=ctl.window(state.v))
        else:
            proj = res.projection
        ds = proj.s_star - s_true
        if ref.closed:
            ds = (ds + 0.5 * ref.total_length) % ref.total_length - 0.5 * ref.total_length
        progress += ds
        s_true = proj.s_star
        d_true = proj.d_e
        u = res.control
        rows["t"].append(k * dt)
        rows["s"].append(progress)
        rows["d_e"].append(d_true)
        rows["v_e"].append(state.v - proj.v_p)
        rows["theta_e"].append(heading_error(state.theta, proj.theta_ref))
        for f, val in zip(plat.state_fields, plat.state_array(state)):
            rows[f"true_{f}"].append(val)
        for f, val in zip(plat.state_fields, plat.state_array(meas)):
            rows[f"meas_{f}"].append(val)
        for f, val in zip(plat.error_fields, res.psi):
            rows[f"psi_{f}"].append(val)
        for f, val in zip(plat.control_fields, u):
            rows[f"u_{f}"].append(val)
        rows["iterations"].append(res.solution.iterations)
        rows["cost"].append(res.solution.cost)
        if keep_cost_histories:
            histories.append(list(res.solution.cost_history))
        if abs(d_true) > DIVERGED_D_E:
            aborted = True
            reason = f"vehicle diverged: |d_e| = {abs(d_true):.1f} m at t = {k * dt:.2f} s"
            log.warning(reason)
            break
        if progress >= end_s:
            completed = True
            break
        state = plat.advance(state, u, plant)
        if noise.process_noise:
            state = _process_noise(state, noise, rng)
    log_arrays = {c: np.asarray(v, dtype=float) for c, v in rows.items()}
    n = len(log_arrays["t"])
    metrics = compute_metrics(log_arrays) if n else None
    return EpisodeResult(
        log=log_arrays,
        columns=columns,
        metrics=metrics,
        steps=n,
        aborted=aborted,
        reason=reason,
        completed=completed,
        solver_warnings=ctl.warnings,
        cost_histories=histories,
    )


def _measure(state, noise: NoiseSpec, rng: np.random.Generator, plat):
    if not noise.enabled:
        return state
    vals = plat.state_array(state).copy()
    idx = {f: i for i, f in enumerate(plat.state_fields)}
    dx, dy = rng.normal(0.0, noise.position_sigma, 2) if noise.position_sigma > 0 else (0.0, 0.0)
    dth = rng.normal(0.0, noise.heading_sigma) if noise.heading_sigma > 0 else 0.0
    dv = rng.normal(0.0, noise.velocity_sigma) if noise.velocity_sigma > 0 else 0.0
    vals[idx["x"]] += dx
    vals[idx["y"]] += dy
    vals[idx["theta"]] = wrap_angle(vals[idx["theta"]] + dth)
    vals[idx["v"]] = max(vals[idx["v"]] + dv, 0.0)
    return plat.make_state(vals)


def _process_noise(state, noise: NoiseSpec, rng):
    from dataclasses import replace

    return replace(state, v=max(0.0, state.v + rng.normal(0.0, noise.process_sigma)))


# -- batch evaluation -------------------------------------------------------------


@dataclass
class ReportRow:
    name: str
    metrics: Optional[Metrics]
    error: str = ""


@dataclass
class ReportTable:
    rows: list[ReportRow]

    HEADER = ("Reference", "ACE", "MCE", "AVE", "MVE")

    def to_csv(self) -> str:
        lines = ["reference,ace,mce,ave,mve,error"]
        for r in self.rows:
            if r.metrics is None:
                lines.append(f"{r.name},,,,,{r.error}")
            else:
                m = r.metrics
                lines.append(f"{r.name},{m.ace:.4f},{m.mce:.4f},{m.ave:.4f},{m.mve:.4f},")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max([len(self.HEADER[0])] + [len(r.name) for r in self.rows]) + 2
        out = [f"{self.HEADER[0]:<{width}}{'ACE':>9}{'MCE':>9}{'AVE':>11}{'MVE':>11}"]
        for r in self.rows:
            if r.metrics is None:
                out.append(f"{r.name:<{width}}  failed: {r.error}")
            else:
                m = r.metrics
                out.append(
                    f"{r.name:<{width}}{m.ace:>8.2f}m{m.mce:>8.2f}m{m.ave:>8.2f}m/s{m.mve:>8.2f}m/s"
                )
        return "\n".join(out) + "\n"


def _run_named(item):
    name, fn = item
    try:
        return ReportRow(name, fn())
    except Exception as exc:  # noqa: BLE001 - per-scenario failures are reported, not raised
        return ReportRow(name, None, f"{type(exc).__name__}: {exc}")


def batch_evaluate(
    scenarios: Sequence[tuple[str, Callable[[], Metrics]]], parallelism: int = 1
) -> ReportTable:
    """Run ``(name, thunk)`` scenarios and tabulate their metrics.

    Thunks must be picklable when ``parallelism > 1``. Each scenario carries its
    own seed, so results do not depend on the degree of parallelism.
    """
    items = list(scenarios)
    if not items:
        return ReportTable([])
    if parallelism <= 1 or len(items) == 1:
        rows = [_run_named(it) for it in items]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            rows = list(ex.map(_run_named, items))
    return ReportTable(rows)
