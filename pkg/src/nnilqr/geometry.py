"""Reference paths: waypoints, arc-length cubic splines and closest-point projection.

A reference is built in two stages. An interpolating cubic spline is fitted
through the waypoints on a chord-length parameter, and its true arc length is
integrated with Gauss-Legendre quadrature on a fine sub-grid. A second cubic
spline is then fitted through those sub-grid points against their arc-length
values, so the stored curve is piecewise cubic in arc length ``s`` and passes
through every waypoint exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

TWO_PI = 2.0 * math.pi

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
_SUBDIVISIONS = 8  # arc-length sub-intervals per waypoint segment
_GRID_SPACING = 0.25  # [m] coarse projection grid


def wrap_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(angle, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def heading_error(theta: float, theta_ref: float) -> float:
    """Heading of the robot relative to the path tangent, wrapped to (-pi, pi]."""
    return wrap_angle(theta - theta_ref)


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    speed: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.speed)):
            raise ValueError("waypoint fields must be finite")
        if self.speed < 0.0:
            raise ValueError(f"waypoint speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class ProjectionResult:
    s_star: float  # [m] arc length of the closest point
    d_e: float  # [m] signed distance, positive left of travel direction
    theta_ref: float  # [rad] path heading at s_star
    v_p: float  # [m/s] reference speed at s_star


class ReferenceTrajectory:
    """Arc-length parameterized cubic spline with a piecewise-linear speed profile.

    Instances are immutable after construction; use :func:`fit_cubic_spline`.
    """

    def __init__(
        self,
        spline: CubicSpline,
        knot_s: np.ndarray,
        knot_speed: np.ndarray,
        total_length: float,
        closed: bool,
    ) -> None:
        self._spline = spline
        self._d1 = spline.derivative(1)
        self._d2 = spline.derivative(2)
        self.knot_s = knot_s
        self.knot_speed = knot_speed
        self.total_length = float(total_length)
        self.closed = closed
        n_grid = max(int(math.ceil(self.total_length / _GRID_SPACING)), 2)
        self._grid_s = np.linspace(0.0, self.total_length, n_grid + 1)
        self._grid_xy = spline(self._grid_s)

    # -- evaluation ---------------------------------------------------------

    def wrap_s(self, s):
        """Map ``s`` into the valid parameter range (modulo length when closed)."""
        if self.closed:
            return np.mod(s, self.total_length)
        return np.clip(s, 0.0, self.total_length)

    def position(self, s):
        return self._spline(self.wrap_s(s))

    def tangent(self, s):
        """Unit tangent vector(s) at ``s``."""
        d = self._d1(self.wrap_s(s))
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def heading(self, s):
        d = self._d1(self.wrap_s(s))
        return np.arctan2(d[..., 1], d[..., 0])

    def curvature(self, s):
        s = self.wrap_s(s)
        d1 = self._d1(s)
        d2 = self._d2(s)
        cross = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
        return cross / np.linalg.norm(d1, axis=-1) ** 3

    def speed(self, s):
        return np.interp(self.wrap_s(s), self.knot_s, self.knot_speed)

    def sample(self, n: int) -> np.ndarray:
        """``n`` points evenly spaced in arc length, shape (n, 2)."""
        return self.position(np.linspace(0.0, self.total_length, n))

    # -- projection ---------------------------------------------------------

    def _refine(self, s: float, q: np.ndarray, lo: float, hi: float) -> float:
        # Newton on g(s) = (P(s) - q) . P'(s)
        for _ in range(8):
            sw = float(self.wrap_s(s))
            r = self._spline(sw) - q
            d1 = self._d1(sw)
            d2 = self._d2(sw)
            g = r @ d1
            dg = d1 @ d1 + r @ d2
            if dg <= 1e-12:
                step = g / max(d1 @ d1, 1e-12)
            else:
                step = g / dg
            step = max(min(step, _GRID_SPACING), -_GRID_SPACING)
            s_new = min(max(s - step, lo), hi)
            if abs(s_new - s) < 1e-10:
                s = s_new
                break
            s = s_new
        return s

    def project(
        self,
        x: float,
        y: float,
        s_hint: Optional[float] = None,
        window: float = 5.0,
    ) -> ProjectionResult:
        """Closest point on the path to ``(x, y)``.

        With ``s_hint`` the search is limited to ``[s_hint - window, s_hint + window]``,
        which keeps the projection on the current branch of self-crossing tracks.
        """
        q = np.array([x, y], dtype=float)
        if s_hint is None:
            grid_s = self._grid_s
            grid_xy = self._grid_xy
            lo, hi = (-math.inf, math.inf) if self.closed else (0.0, self.total_length)
        else:
            lo, hi = s_hint - window, s_hint + window
            if not self.closed:
                lo, hi = max(lo, 0.0), min(hi, self.total_length)
            n = max(int(math.ceil((hi - lo) / _GRID_SPACING)), 1)
            grid_s = np.linspace(lo, hi, n + 1)
            grid_xy = self.position(grid_s)
        dist2 = np.sum((grid_xy - q) ** 2, axis=1)
        j = int(np.argmin(dist2))
        if self.closed and s_hint is None:
            s = self._refine(float(grid_s[j]), q, -math.inf, math.inf)
        else:
            s = self._refine(float(grid_s[j]), q, lo, hi)
        s = float(self.wrap_s(s))
        if self.closed and s >= self.total_length:
            s = 0.0
        p = self._spline(s)
        d1 = self._d1(s)
        t = d1 / math.hypot(d1[0], d1[1])
        r = q - p
        d_e = float(t[0] * r[1] - t[1] * r[0])
        return ProjectionResult(
            s_star=s,
            d_e=d_e,
            theta_ref=math.atan2(t[1], t[0]),
            v_p=float(self.speed(s)),
        )


def _arc_lengths(spline: CubicSpline, t: np.ndarray) -> np.ndarray:
    """Cumulative arc length of ``spline`` at the sorted parameter values ``t``."""
    d1 = spline.derivative(1)
    a, b = t[:-1], t[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    speed = np.linalg.norm(d1(nodes.ravel()), axis=1).reshape(nodes.shape)
    pieces = half * (speed @ _GL_WEIGHTS)
    return np.concatenate([[0.0], np.cumsum(pieces)])


def fit_cubic_spline(waypoints: Sequence[Waypoint], closed: bool = False) -> ReferenceTrajectory:
    """Fit an interpolating cubic spline through ``waypoints``, parameterized by arc length.

    Open paths use natural end conditions; closed paths are periodic, so position
    and tangent are continuous across the seam. A closed input whose last point
    repeats the first has the duplicate dropped.
    """
    pts = np.array([[w.x, w.y] for w in waypoints], dtype=float)
    speeds = np.array([w.speed for w in waypoints], dtype=float)
    if closed and len(pts) >= 2 and np.linalg.norm(pts[-1] - pts[0]) <= 1e-6:
        pts, speeds = pts[:-1], speeds[:-1]
    min_points = 3 if closed else 2
    if len(pts) < min_points:
        raise ValueError(
            f"need at least {min_points} waypoints for a {'closed' if closed else 'open'} path, got {len(pts)}"
        )
    chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(chords <= 1e-6):
        i = int(np.argmax(chords <= 1e-6))
        raise ValueError(f"waypoints {i} and {i + 1} are coincident")

    if closed:
        pts = np.vstack([pts, pts[:1]])
        speeds = np.concatenate([speeds, speeds[:1]])
        chords = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        bc = "periodic"
    else:
        bc = "natural"
    t_knots = np.concatenate([[0.0], np.cumsum(chords)])
    chord_spline = CubicSpline(t_knots, pts, bc_type=bc)

    frac = np.arange(_SUBDIVISIONS) / _SUBDIVISIONS
    t_fine = (t_knots[:-1, None] + np.diff(t_knots)[:, None] * frac[None, :]).ravel()
    t_fine = np.concatenate([t_fine, t_knots[-1:]])
    s_fine = _arc_lengths(chord_spline, t_fine)
    xy_fine = chord_spline(t_fine)
    knot_idx = np.arange(len(t_knots)) * _SUBDIVISIONS
    xy_fine[knot_idx] = pts  # exact interpolation at waypoints
    if closed:
        xy_fine[-1] = xy_fine[0]
    spline = CubicSpline(s_fine, xy_fine, bc_type=bc)
    return ReferenceTrajectory(
        spline=spline,
        knot_s=s_fine[knot_idx],
        knot_speed=speeds,
        total_length=float(s_fine[-1]),
        closed=closed,
    )


def project(
    ref: ReferenceTrajectory, x: float, y: float, s_hint: Optional[float] = None, window: float = 5.0
) -> ProjectionResult:
    return ref.project(x, y, s_hint=s_hint, window=window)


def read_waypoints(path: str | Path) -> list[Waypoint]:
    """Read a ``x,y,speed`` waypoint CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"x", "y", "speed"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [Waypoint(float(r["x"]), float(r["y"]), float(r["speed"])) for r in reader]


def write_waypoints(path: str | Path, waypoints: Iterable[Waypoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "speed"])
        for w in waypoints:
            writer.writerow([repr(w.x), repr(w.y), repr(w.speed)])
