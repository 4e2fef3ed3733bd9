"""Error-state trajectory tracking with ILQR in a receding horizon.

GEM error state (9): ``d_e, theta_e, v_e, d_e_dot, theta_e_dot, v_e_dot, v, phi_dot, phi``.
Warthog error state (6): ``d_e, theta_e, v_e, d_e_dot, v, omega``; the heading
error rate is the yaw rate ``omega`` itself, so it is not stored twice.

The error transition treats the reference as locally straight (no path
curvature term in the heading-error rate). Curvature shows up only through the
measured errors fed back at every replanning step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import astuple, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import ProjectionResult, ReferenceTrajectory, heading_error, wrap_angle
from .ilqr import IlqrSolution, OcProblem, SolverConfig, StageDerivatives, solve
from .plants import (
    GEM_DT,
    GEM_PHI_DOT_MAX,
    WARTHOG_DT,
    WARTHOG_OMEGA_MAX,
    WARTHOG_V_MAX,
    DynamicsModel,
)

log = logging.getLogger(__name__)

GEM_WHEELBASE = 1.75  # [m]
GEM_PHI_MAX = 0.6  # [rad]

GEM_U_MIN = np.array([0.0, 0.0, -GEM_PHI_DOT_MAX])
GEM_U_MAX = np.array([1.0, 1.0, GEM_PHI_DOT_MAX])
WARTHOG_U_MIN = np.array([0.0, -WARTHOG_OMEGA_MAX])
WARTHOG_U_MAX = np.array([WARTHOG_V_MAX, WARTHOG_OMEGA_MAX])


# -- state types ------------------------------------------------------------


@dataclass(frozen=True)
class GemState:
    x: float
    y: float
    theta: float
    phi: float
    v: float
    phi_dot: float


@dataclass(frozen=True)
class GemControl:
    pedal: float
    brake: float
    phi_dot_cmd: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.pedal <= 1.0 and 0.0 <= self.brake <= 1.0):
            raise ValueError("pedal and brake must lie in [0, 1]")
        if abs(self.phi_dot_cmd) > GEM_PHI_DOT_MAX + 1e-12:
            raise ValueError("steering rate command exceeds 60 deg/s")

    def as_array(self) -> np.ndarray:
        return np.array([self.pedal, self.brake, self.phi_dot_cmd])


@dataclass(frozen=True)
class WarthogState:
    x: float
    y: float
    theta: float
    v: float
    omega: float


@dataclass(frozen=True)
class WarthogControl:
    v_cmd: float
    omega_cmd: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.v_cmd <= WARTHOG_V_MAX:
            raise ValueError("v_cmd must lie in [0, 4.5] m/s")
        if abs(self.omega_cmd) > WARTHOG_OMEGA_MAX + 1e-12:
            raise ValueError("omega_cmd exceeds 180 deg/s")

    def as_array(self) -> np.ndarray:
        return np.array([self.v_cmd, self.omega_cmd])


@dataclass(frozen=True)
class ErrorState:
    d_e: float
    theta_e: float
    v_e: float
    d_e_dot: float
    theta_e_dot: float
    v_e_dot: float
    v: float
    phi_dot: float
    phi: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self))

    @classmethod
    def from_array(cls, a) -> "ErrorState":
        return cls(*map(float, a))


@dataclass(frozen=True)
class WarthogErrorState:
    d_e: float
    theta_e: float
    v_e: float
    d_e_dot: float
    v: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self))

    @classmethod
    def from_array(cls, a) -> "WarthogErrorState":
        return cls(*map(float, a))


@dataclass(frozen=True)
class BicycleParams:
    L: float = GEM_WHEELBASE
    dt: float = GEM_DT
    phi_max: float = GEM_PHI_MAX

    def __post_init__(self) -> None:
        if self.L <= 0:
            raise ValueError("wheelbase must be positive")


@dataclass(frozen=True)
class TrackingWeights:
    """Diagonals of the error-state weight ``A`` and control weight ``B``.

    The trailing ``n_copied`` entries of ``A`` weight plain vehicle states and
    must be zero.
    """

    A: tuple[float, ...]
    B: tuple[float, ...]
    n_copied: int = 3

    def __post_init__(self) -> None:
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("weights must be finite")
        if np.any(A < 0) or np.any(B < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(A[len(A) - self.n_copied :] != 0):
            raise ValueError(f"the last {self.n_copied} state weights must be zero")

    @property
    def a(self) -> np.ndarray:
        return np.asarray(self.A, dtype=float)

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.B, dtype=float)


# Cross-track weight raised from 10 and pedal/brake weights lowered from 0.5: the
# error dynamics carry no path curvature, which leaves a steady offset on curves
# roughly inversely proportional to the d_e weight.
GEM_WEIGHTS = TrackingWeights(A=(100.0, 5.0, 2.0, 1.0, 1.0, 0.5, 0.0, 0.0, 0.0), B=(0.05, 0.05, 0.1))
WARTHOG_WEIGHTS = TrackingWeights(A=(10.0, 5.0, 2.0, 1.0, 0.0, 0.0), B=(0.01, 0.1), n_copied=2)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 40
    replan_every: int = 1
    warm_start: bool = True
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(max_iterations=10, cost_tolerance=1e-3))

    def __post_init__(self) -> None:
        if self.horizon < 5:
            raise ValueError("horizon must be at least 5")
        if not 1 <= self.replan_every < self.horizon:
            raise ValueError("replan_every must lie in [1, horizon)")


# -- GEM kinematics and error dynamics -------------------------------------


def full_state_step(s: GemState, u, model: DynamicsModel, params: BicycleParams) -> GemState:
    """Bicycle-model pose update with ``(v, phi_dot)`` propagated by ``model``."""
    u = np.asarray(u.as_array() if isinstance(u, GemControl) else u, dtype=float)
    dt = params.dt
    v_next, phi_dot_next = model.step(np.array([s.v, s.phi_dot]), u)
    phi = min(max(s.phi + s.phi_dot * dt, -params.phi_max), params.phi_max)
    return GemState(
        x=s.x + s.v * math.cos(s.theta) * dt,
        y=s.y + s.v * math.sin(s.theta) * dt,
        theta=wrap_angle(s.theta + s.v * math.tan(s.phi) / params.L * dt),
        phi=phi,
        v=float(v_next),
        phi_dot=float(phi_dot_next),
    )


def compute_error_state(
    s: GemState,
    ref: ReferenceTrajectory,
    prev: Optional[ErrorState] = None,
    params: BicycleParams = BicycleParams(),
    s_hint: Optional[float] = None,
    window: float = 5.0,
) -> tuple[ErrorState, ProjectionResult]:
    proj = ref.project(s.x, s.y, s_hint=s_hint, window=window)
    theta_e = heading_error(s.theta, proj.theta_ref)
    v_e_dot = 0.0 if prev is None else (s.v - prev.v) / params.dt
    psi = ErrorState(
        d_e=proj.d_e,
        theta_e=theta_e,
        v_e=s.v - proj.v_p,
        d_e_dot=s.v * math.sin(theta_e),
        theta_e_dot=s.v * math.tan(s.phi) / params.L,
        v_e_dot=v_e_dot,
        v=s.v,
        phi_dot=s.phi_dot,
        phi=s.phi,
    )
    return psi, proj


def gamma_step(psi, u, model: DynamicsModel, params: BicycleParams, v_p: float) -> np.ndarray:
    """Next GEM error state from the current one under control ``u``."""
    d, th, ve, dd, dth, dve, v, phid, phi = psi
    dt = params.dt
    v2, phid2 = model.step(np.array([v, phid]), u)
    ve2 = ve + dve * dt
    w = ve2 + v_p
    a = th + dth * dt
    b = phi + phid * dt
    return np.array([d + dd * dt, a, ve2, w * math.sin(a), w * math.tan(b) / params.L, (v2 - v) / dt, v2, phid2, b])


def _model_jacobians(model: DynamicsModel, X: np.ndarray, U: np.ndarray):
    if hasattr(model, "jacobians_batch"):
        return model.jacobians_batch(X, U)
    return model.linearize(X, U)


def _model_predict(model: DynamicsModel, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    if hasattr(model, "predict"):
        return model.predict(X, U)
    return np.array([model.step(x, u) for x, u in zip(X, U)])


class GemErrorDynamics(DynamicsModel):
    """Error-state transition over a horizon with a fixed per-step reference speed."""

    n, m = 9, 3

    def __init__(self, model: DynamicsModel, params: BicycleParams, v_p: Sequence[float]) -> None:
        self.model = model
        self.params = params
        self.dt = params.dt
        self.v_p = np.asarray(v_p, dtype=float)

    def step(self, x, u, t=0):
        return gamma_step(x, u, self.model, self.params, self.v_p[t])

    def step_batch(self, X, U, t=0):
        """:func:`gamma_step` applied row-wise (same reference speed for every row)."""
        dt, L = self.dt, self.params.L
        nxt = _model_predict(self.model, X[:, 6:8], U)
        ve2 = X[:, 2] + X[:, 5] * dt
        w = ve2 + self.v_p[t]
        a = X[:, 1] + X[:, 4] * dt
        b = X[:, 8] + X[:, 7] * dt
        return np.column_stack(
            [X[:, 0] + X[:, 3] * dt, a, ve2, w * np.sin(a), w * np.tan(b) / L, (nxt[:, 0] - X[:, 6]) / dt, nxt[:, 0], nxt[:, 1], b]
        )

    def linearize(self, X, U):
        T = len(U)
        X = np.asarray(X)[:T]
        dt, L = self.dt, self.params.L
        Jx, Ju = _model_jacobians(self.model, X[:, 6:8], U)
        ve, dve = X[:, 2], X[:, 5]
        w = ve + dve * dt + self.v_p[:T]
        a = X[:, 1] + X[:, 4] * dt
        b = X[:, 8] + X[:, 7] * dt
        sa, ca = np.sin(a), np.cos(a)
        tb = np.tan(b)
        sec2 = 1.0 + tb * tb
        fx = np.zeros((T, 9, 9))
        fu = np.zeros((T, 9, 3))
        fx[:, 0, 0] = 1.0
        fx[:, 0, 3] = dt
        fx[:, 1, 1] = 1.0
        fx[:, 1, 4] = dt
        fx[:, 2, 2] = 1.0
        fx[:, 2, 5] = dt
        fx[:, 3, 2] = sa
        fx[:, 3, 5] = sa * dt
        fx[:, 3, 1] = w * ca
        fx[:, 3, 4] = w * ca * dt
        fx[:, 4, 2] = tb / L
        fx[:, 4, 5] = tb * dt / L
        fx[:, 4, 8] = w * sec2 / L
        fx[:, 4, 7] = w * sec2 * dt / L
        fx[:, 5, 6:8] = Jx[:, 0, :] / dt
        fx[:, 5, 6] -= 1.0 / dt
        fx[:, 6, 6:8] = Jx[:, 0, :]
        fx[:, 7, 6:8] = Jx[:, 1, :]
        fx[:, 8, 8] = 1.0
        fx[:, 8, 7] = dt
        fu[:, 5, :] = Ju[:, 0, :] / dt
        fu[:, 6, :] = Ju[:, 0, :]
        fu[:, 7, :] = Ju[:, 1, :]
        return fx, fu


# -- Warthog analog ---------------------------------------------------------


def warthog_full_state_step(s: WarthogState, u, model: DynamicsModel, dt: float = WARTHOG_DT) -> WarthogState:
    """Unicycle pose update with ``(v, omega)`` propagated by ``model``."""
    u = np.asarray(u.as_array() if isinstance(u, WarthogControl) else u, dtype=float)
    v2, w2 = model.step(np.array([s.v, s.omega]), u)
    return WarthogState(
        x=s.x + s.v * math.cos(s.theta) * dt,
        y=s.y + s.v * math.sin(s.theta) * dt,
        theta=wrap_angle(s.theta + s.omega * dt),
        v=float(v2),
        omega=float(w2),
    )


def warthog_error_state(
    s: WarthogState,
    ref: ReferenceTrajectory,
    prev: Optional[WarthogErrorState] = None,
    dt: float = WARTHOG_DT,
    s_hint: Optional[float] = None,
    window: float = 5.0,
) -> tuple[WarthogErrorState, ProjectionResult]:
    proj = ref.project(s.x, s.y, s_hint=s_hint, window=window)
    theta_e = heading_error(s.theta, proj.theta_ref)
    psi = WarthogErrorState(
        d_e=proj.d_e,
        theta_e=theta_e,
        v_e=s.v - proj.v_p,
        d_e_dot=s.v * math.sin(theta_e),
        v=s.v,
        omega=s.omega,
    )
    return psi, proj


def warthog_gamma_step(psi, u, model: DynamicsModel, dt: float, v_p: float) -> np.ndarray:
    d, th, ve, dd, v, w = psi
    v2, w2 = model.step(np.array([v, w]), u)
    ve2 = ve + (v2 - v)
    th2 = th + w * dt
    return np.array([d + dd * dt, th2, ve2, (ve2 + v_p) * math.sin(th2), v2, w2])


class WarthogErrorDynamics(DynamicsModel):
    n, m = 6, 2

    def __init__(self, model: DynamicsModel, dt: float, v_p: Sequence[float]) -> None:
        self.model = model
        self.dt = dt
        self.v_p = np.asarray(v_p, dtype=float)

    def step(self, x, u, t=0):
        return warthog_gamma_step(x, u, self.model, self.dt, self.v_p[t])

    def step_batch(self, X, U, t=0):
        nxt = _model_predict(self.model, X[:, 4:6], U)
        ve2 = X[:, 2] + nxt[:, 0] - X[:, 4]
        th2 = X[:, 1] + X[:, 5] * self.dt
        return np.column_stack(
            [X[:, 0] + X[:, 3] * self.dt, th2, ve2, (ve2 + self.v_p[t]) * np.sin(th2), nxt[:, 0], nxt[:, 1]]
        )

    def linearize(self, X, U):
        T = len(U)
        X = np.asarray(X)[:T]
        dt = self.dt
        Jx, Ju = _model_jacobians(self.model, X[:, 4:6], U)
        v2 = _model_predict(self.model, X[:, 4:6], U)[:, 0]
        ve2 = X[:, 2] + v2 - X[:, 4]
        th2 = X[:, 1] + X[:, 5] * dt
        s2, c2 = np.sin(th2), np.cos(th2)
        w = ve2 + self.v_p[:T]
        fx = np.zeros((T, 6, 6))
        fu = np.zeros((T, 6, 2))
        fx[:, 0, 0] = 1.0
        fx[:, 0, 3] = dt
        fx[:, 1, 1] = 1.0
        fx[:, 1, 5] = dt
        # ve' = ve + v' - v
        fx[:, 2, 2] = 1.0
        fx[:, 2, 4:6] = Jx[:, 0, :]
        fx[:, 2, 4] -= 1.0
        fu[:, 2, :] = Ju[:, 0, :]
        # d_e_dot' = (ve' + v_p) sin(theta_e')
        fx[:, 3, :] = s2[:, None] * fx[:, 2, :]
        fx[:, 3, 1] += w * c2
        fx[:, 3, 5] += w * c2 * dt
        fu[:, 3, :] = s2[:, None] * fu[:, 2, :]
        fx[:, 4, 4:6] = Jx[:, 0, :]
        fx[:, 5, 4:6] = Jx[:, 1, :]
        fu[:, 4, :] = Ju[:, 0, :]
        fu[:, 5, :] = Ju[:, 1, :]
        return fx, fu


# -- costs --------------------------------------------------------------------


def stage_cost(psi, u, weights: TrackingWeights):
    """``psi' A psi + u' B u`` with gradient and Hessian blocks ``(l, l_x, l_u, l_xx, l_uu, l_ux)``."""
    psi = np.asarray(psi, dtype=float)
    u = np.asarray(u, dtype=float)
    a, b = weights.a, weights.b
    value = float(psi @ (a * psi) + u @ (b * u))
    return value, 2.0 * a * psi, 2.0 * b * u, np.diag(2.0 * a), np.diag(2.0 * b), np.zeros((u.size, psi.size))


def final_cost(psi, weights: TrackingWeights):
    """``psi' A psi`` with ``(l_f, l_f_x, l_f_xx)``."""
    psi = np.asarray(psi, dtype=float)
    a = weights.a
    return float(psi @ (a * psi)), 2.0 * a * psi, np.diag(2.0 * a)


class TrackingCost:
    """Adapter exposing :func:`stage_cost` / :func:`final_cost` to the solver, batched."""

    def __init__(self, weights: TrackingWeights) -> None:
        self.weights = weights
        self.a = weights.a
        self.b = weights.b

    def stage(self, x, u, t=0):
        return float(x @ (self.a * x) + u @ (self.b * u))

    def stage_total(self, X, U):
        T = len(U)
        return float(np.sum(X[:T] * X[:T] * self.a) + np.sum(U * U * self.b))

    def stage_derivatives(self, X, U):
        T = len(U)
        n, m = self.a.size, self.b.size
        return StageDerivatives(
            lx=2.0 * X[:T] * self.a,
            lu=2.0 * U * self.b,
            lxx=np.broadcast_to(np.diag(2.0 * self.a), (T, n, n)),
            luu=np.broadcast_to(np.diag(2.0 * self.b), (T, m, m)),
            lux=np.zeros((T, m, n)),
        )

    def final(self, x):
        return float(x @ (self.a * x))

    def final_derivatives(self, x):
        return 2.0 * self.a * x, np.diag(2.0 * self.a)


# -- platforms ----------------------------------------------------------------


class GemPlatform:
    name = "gem"
    dt = GEM_DT
    n, m = 9, 3
    speed_index = 6
    u_min = GEM_U_MIN
    u_max = GEM_U_MAX
    default_weights = GEM_WEIGHTS

    def __init__(self, params: BicycleParams | None = None) -> None:
        self.params = params or BicycleParams()
        self.dt = self.params.dt

    def coast(self) -> np.ndarray:
        return np.zeros(3)

    def error_state(self, s: GemState, ref, prev_psi, s_hint, window):
        prev = None if prev_psi is None else ErrorState.from_array(prev_psi)
        psi, proj = compute_error_state(s, ref, prev, self.params, s_hint, window)
        return psi.as_array(), proj

    def error_dynamics(self, model, v_p):
        return GemErrorDynamics(model, self.params, v_p)

    def advance(self, s: GemState, u, model) -> GemState:
        return full_state_step(s, u, model, self.params)

    def start_state(self, ref: ReferenceTrajectory) -> GemState:
        x, y = ref.position(0.0)
        return GemState(float(x), float(y), float(ref.heading(0.0)), 0.0, 0.0, 0.0)

    def state_array(self, s: GemState) -> np.ndarray:
        return np.array(astuple(s))

    def make_state(self, values) -> GemState:
        return GemState(*map(float, values))

    state_fields = ("x", "y", "theta", "phi", "v", "phi_dot")
    control_fields = ("pedal", "brake", "phi_dot_cmd")
    error_fields = ("d_e", "theta_e", "v_e", "d_e_dot", "theta_e_dot", "v_e_dot", "v", "phi_dot", "phi")


class WarthogPlatform:
    name = "warthog"
    n, m = 6, 2
    speed_index = 4
    u_min = WARTHOG_U_MIN
    u_max = WARTHOG_U_MAX
    default_weights = WARTHOG_WEIGHTS

    def __init__(self, dt: float = WARTHOG_DT) -> None:
        self.dt = dt

    def coast(self) -> np.ndarray:
        return np.zeros(2)

    def error_state(self, s: WarthogState, ref, prev_psi, s_hint, window):
        psi, proj = warthog_error_state(s, ref, None, self.dt, s_hint, window)
        return psi.as_array(), proj

    def error_dynamics(self, model, v_p):
        return WarthogErrorDynamics(model, self.dt, v_p)

    def advance(self, s: WarthogState, u, model) -> WarthogState:
        return warthog_full_state_step(s, u, model, self.dt)

    def start_state(self, ref: ReferenceTrajectory) -> WarthogState:
        x, y = ref.position(0.0)
        return WarthogState(float(x), float(y), float(ref.heading(0.0)), 0.0, 0.0)

    def state_array(self, s: WarthogState) -> np.ndarray:
        return np.array(astuple(s))

    def make_state(self, values) -> WarthogState:
        return WarthogState(*map(float, values))

    state_fields = ("x", "y", "theta", "v", "omega")
    control_fields = ("v_cmd", "omega_cmd")
    error_fields = ("d_e", "theta_e", "v_e", "d_e_dot", "v", "omega")


def make_platform(name: str):
    if name == "gem":
        return GemPlatform()
    if name == "warthog":
        return WarthogPlatform()
    raise ValueError(f"unknown platform {name!r}")


# -- problem assembly and MPC -----------------------------------------------


def reference_speed_schedule(
    ref: ReferenceTrajectory, s0: float, speeds: np.ndarray, dt: float
) -> np.ndarray:
    """Reference speed at arc lengths reached by advancing ``s0`` with predicted ``speeds``."""
    s = s0 + np.concatenate([[0.0], np.cumsum(np.maximum(speeds[:-1], 0.0) * dt)])
    return np.asarray(ref.speed(s), dtype=float)


def build_tracking_problem(
    psi0: np.ndarray,
    s0: float,
    ref: ReferenceTrajectory,
    learned: DynamicsModel,
    weights: TrackingWeights,
    config: MpcConfig,
    platform=None,
    previous: Optional[IlqrSolution] = None,
    shift: int = 1,
) -> tuple[OcProblem, np.ndarray]:
    """Tracking OCP over ``config.horizon`` states and the initial control guess.

    The per-step reference speed follows the arc length predicted from the
    warm-start trajectory (or the current speed on a cold start).
    """
    platform = platform or GemPlatform()
    N = config.horizon
    psi0 = np.asarray(psi0, dtype=float)
    vi = platform.speed_index
    if previous is not None and config.warm_start and len(previous.trajectory.U) == N - 1:
        U_prev = previous.trajectory.U
        U0 = np.vstack([U_prev[shift:], np.repeat(U_prev[-1:], shift, axis=0)])
        X_prev = previous.trajectory.X
        speeds = np.concatenate([[psi0[vi]], X_prev[shift + 1 :, vi], np.repeat(X_prev[-1:, vi], shift, axis=0)])
        speeds = speeds[:N]
    else:
        U0 = np.tile(platform.coast(), (N - 1, 1))
        speeds = np.full(N, psi0[vi])
    v_p = reference_speed_schedule(ref, s0, speeds, platform.dt)
    cost = TrackingCost(weights)
    problem = OcProblem(
        dynamics=platform.error_dynamics(learned, v_p),
        stage_cost=cost,
        final_cost=cost,
        x0=psi0,
        horizon=N,
        u_min=platform.u_min,
        u_max=platform.u_max,
    )
    return problem, U0


@dataclass
class MpcStepResult:
    control: np.ndarray
    solution: IlqrSolution
    psi: np.ndarray
    projection: ProjectionResult


class MpcController:
    """Receding-horizon tracker: project, build the error-state OCP, solve, apply the first control."""

    def __init__(
        self,
        ref: ReferenceTrajectory,
        learned: DynamicsModel,
        weights: TrackingWeights | None = None,
        config: MpcConfig | None = None,
        platform=None,
        trace=None,
    ) -> None:
        self.ref = ref
        self.learned = learned
        self.platform = platform or GemPlatform()
        self.weights = weights or self.platform.default_weights
        self.config = config or MpcConfig()
        self.trace = trace
        self.prev_psi: Optional[np.ndarray] = None
        self.s_hint: Optional[float] = 0.0
        self.solution: Optional[IlqrSolution] = None
        self._since_solve = 0
        self.warnings = 0

    def window(self, v: float) -> float:
        return 5.0 + abs(v) * self.platform.dt * self.config.horizon

    def step(self, measured) -> MpcStepResult:
        psi, proj = self.platform.error_state(
            measured, self.ref, self.prev_psi, self.s_hint, self.window(measured.v)
        )
        self.s_hint = proj.s_star
        self.prev_psi = psi
        cfg = self.config
        if self.solution is None or self._since_solve + 1 >= cfg.replan_every:
            shift = self._since_solve + 1
            problem, U0 = build_tracking_problem(
                psi, proj.s_star, self.ref, self.learned, self.weights, cfg, self.platform, self.solution, shift
            )
            sol = solve(problem, U0, cfg.solver, trace=self.trace)
            if not sol.converged:
                self.warnings += 1
                log.debug("MPC: solver did not converge (cost %.4g, %d iterations)", sol.cost, sol.iterations)
            self.solution = sol
            self._since_solve = 0
            control = sol.trajectory.U[0].copy()
        else:
            self._since_solve += 1
            control = self.solution.trajectory.U[self._since_solve].copy()
        return MpcStepResult(control=control, solution=self.solution, psi=psi, projection=proj)


def mpc_step(
    current,
    ref: ReferenceTrajectory,
    learned: DynamicsModel,
    weights: TrackingWeights | None = None,
    config: MpcConfig | None = None,
    previous_solution: Optional[IlqrSolution] = None,
    platform=None,
    prev_psi=None,
    s_hint: Optional[float] = None,
) -> tuple[np.ndarray, IlqrSolution]:
    """One stateless MPC update returning the first control and the full solution."""
    ctl = MpcController(ref, learned, weights, config, platform)
    ctl.solution = previous_solution
    ctl.prev_psi = None if prev_psi is None else np.asarray(prev_psi, dtype=float)
    ctl.s_hint = s_hint
    ctl._since_solve = 0
    res = ctl.step(current)
    return res.control, res.solution
