"""Dynamics contract and the synthetic ground-truth vehicle plants.

The plants are first-order lag models standing in for the physical vehicles.
They generate training data and act as "reality" in closed-loop simulation.
Parameter defaults are plausibility choices, not measured vehicle values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

WARTHOG_DT = 1.0 / 20.0
GEM_DT = 1.0 / 30.0

WARTHOG_V_MAX = 4.5  # [m/s]
WARTHOG_OMEGA_MAX = math.pi  # [rad/s]
GEM_PHI_DOT_MAX = math.radians(60.0)  # [rad/s]


class DynamicsModel:
    """Discrete dynamics ``x' = f(x, u)`` with Jacobians.

    Subclasses implement :meth:`step` and may override :meth:`jacobians` with an
    analytic version; the default is central finite differences. ``t`` is the
    step index inside a horizon and is ignored by time-invariant models.
    """

    n: int
    m: int
    dt: float

    def step(self, x: np.ndarray, u: np.ndarray, t: int = 0) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, x: np.ndarray, u: np.ndarray, t: int = 0) -> tuple[np.ndarray, np.ndarray]:
        return finite_diff_jacobians(self, x, u, t=t)

    def linearize(self, X: np.ndarray, U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stacked Jacobians along a trajectory; step ``i`` linearizes at ``(X[i], U[i])``."""
        T = len(U)
        fx = np.empty((T, self.n, self.n))
        fu = np.empty((T, self.n, self.m))
        for i in range(T):
            fx[i], fu[i] = self.jacobians(X[i], U[i], i)
        return fx, fu


def finite_diff_jacobians(
    model: DynamicsModel, x: np.ndarray, u: np.ndarray, eps: float = 1e-5, t: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians ``(f_x, f_u)`` of ``model.step`` at ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    fx = np.empty((n, n))
    fu = np.empty((n, m))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        fx[:, j] = (model.step(x + e, u, t) - model.step(x - e, u, t)) / (2 * eps)
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        fu[:, j] = (model.step(x, u + e, t) - model.step(x, u - e, t)) / (2 * eps)
    return fx, fu


class LinearModel(DynamicsModel):
    def __init__(self, A: np.ndarray, B: np.ndarray, dt: float = 1.0) -> None:
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n, self.m = self.B.shape
        self.dt = dt

    def step(self, x, u, t=0):
        return self.A @ x + self.B @ u

    def jacobians(self, x, u, t=0):
        return self.A.copy(), self.B.copy()

    def linearize(self, X, U):
        T = len(U)
        return np.broadcast_to(self.A, (T, self.n, self.n)).copy(), np.broadcast_to(
            self.B, (T, self.n, self.m)
        ).copy()


@dataclass(frozen=True)
class WarthogPlantParams:
    tau_v: float = 0.6  # [s]
    tau_w: float = 0.4  # [s]
    slip_gain: float = 0.9
    dt: float = WARTHOG_DT

    def __post_init__(self) -> None:
        if self.tau_v <= 0 or self.tau_w <= 0:
            raise ValueError("time constants must be positive")
        if not 0.0 < self.slip_gain <= 1.0:
            raise ValueError(f"slip_gain must lie in (0, 1], got {self.slip_gain}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class GemPlantParams:
    accel_gain: float = 3.0  # [m/s^2 per unit pedal]
    brake_gain: float = 6.0  # [m/s^2 per unit brake]
    drag: float = 0.05  # [1/s]
    tau_phidot: float = 0.15  # [s]
    dt: float = GEM_DT

    def __post_init__(self) -> None:
        if self.accel_gain <= 0 or self.brake_gain <= 0:
            raise ValueError("accel_gain and brake_gain must be positive")
        if self.drag < 0:
            raise ValueError("drag must be nonnegative")
        if self.tau_phidot <= 0 or self.dt <= 0:
            raise ValueError("tau_phidot and dt must be positive")


def warthog_plant_step(state, control, params: WarthogPlantParams) -> tuple[float, float]:
    """Lag response of ``(v, omega)`` to ``(v_cmd, omega_cmd)``; outputs clamped to limits."""
    v, omega = state
    v_cmd, omega_cmd = control
    av = 1.0 - math.exp(-params.dt / params.tau_v)
    aw = 1.0 - math.exp(-params.dt / params.tau_w)
    v_next = v + (v_cmd - v) * av
    omega_next = omega + (params.slip_gain * omega_cmd - omega) * aw
    v_next = min(max(v_next, 0.0), WARTHOG_V_MAX)
    omega_next = min(max(omega_next, -WARTHOG_OMEGA_MAX), WARTHOG_OMEGA_MAX)
    return v_next, omega_next


def gem_plant_step(state, control, params: GemPlantParams) -> tuple[float, float]:
    """Pedal/brake longitudinal model with drag, plus lagged steering rate."""
    v, phi_dot = state
    pedal, brake, phi_dot_cmd = control
    v_next = max(0.0, v + params.dt * (params.accel_gain * pedal - params.brake_gain * brake - params.drag * v))
    a = 1.0 - math.exp(-params.dt / params.tau_phidot)
    phi_dot_next = phi_dot + (phi_dot_cmd - phi_dot) * a
    return v_next, phi_dot_next


class WarthogPlant(DynamicsModel):
    n, m = 2, 2

    def __init__(self, params: WarthogPlantParams | None = None) -> None:
        self.params = params or WarthogPlantParams()
        self.dt = self.params.dt

    def step(self, x, u, t=0):
        return np.array(warthog_plant_step(x, u, self.params))

    def jacobians(self, x, u, t=0):
        p = self.params
        ev = math.exp(-p.dt / p.tau_v)
        ew = math.exp(-p.dt / p.tau_w)
        fx = np.diag([ev, ew])
        fu = np.diag([1.0 - ev, p.slip_gain * (1.0 - ew)])
        v_next, w_next = warthog_plant_step(x, u, p)
        if v_next <= 0.0 or v_next >= WARTHOG_V_MAX:
            fx[0, :] = 0.0
            fu[0, :] = 0.0
        if abs(w_next) >= WARTHOG_OMEGA_MAX:
            fx[1, :] = 0.0
            fu[1, :] = 0.0
        return fx, fu


class GemPlant(DynamicsModel):
    n, m = 2, 3

    def __init__(self, params: GemPlantParams | None = None) -> None:
        self.params = params or GemPlantParams()
        self.dt = self.params.dt

    def step(self, x, u, t=0):
        return np.array(gem_plant_step(x, u, self.params))

    def jacobians(self, x, u, t=0):
        p = self.params
        e = math.exp(-p.dt / p.tau_phidot)
        fx = np.array([[1.0 - p.dt * p.drag, 0.0], [0.0, e]])
        fu = np.array([[p.dt * p.accel_gain, -p.dt * p.brake_gain, 0.0], [0.0, 0.0, 1.0 - e]])
        v, _ = x
        pedal, brake, _ = u
        if v + p.dt * (p.accel_gain * pedal - p.brake_gain * brake - p.drag * v) <= 0.0:
            fx[0, :] = 0.0
            fu[0, :] = 0.0
        return fx, fu


def perturb_params(params, factors: dict[str, float]):
    """Copy of a plant parameter set with selected fields scaled by ``factors``.

    ``slip_gain`` is capped at 1 so the result stays a valid plant.
    """
    changes = {}
    for name, f in factors.items():
        value = getattr(params, name) * f
        if name == "slip_gain":
            value = min(value, 1.0)
        changes[name] = value
    return replace(params, **changes)
