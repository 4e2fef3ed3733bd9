"""Iterative LQR with Levenberg-Marquardt regularization, line search and control clipping.

Conventions: a horizon of ``N`` has states ``X[0..N-1]`` and controls
``U[0..N-2]``. The total cost is ``sum_i l(X[i], U[i], i) + l_f(X[N-1])``.
Costs are written without the 1/2 factor, so a quadratic ``x'Qx`` has
Hessian ``2Q``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

import numpy as np
from scipy.linalg.lapack import dpotrf, dpotrs

log = logging.getLogger(__name__)


@dataclass
class StageDerivatives:
    """Batched stage-cost derivatives along a trajectory (leading axis = time)."""

    lx: np.ndarray
    lu: np.ndarray
    lxx: np.ndarray
    luu: np.ndarray
    lux: np.ndarray


class QuadraticCost:
    """``(x - x_ref)' Q (x - x_ref) + (u - u_ref)' R (u - u_ref)``, optionally as a final cost."""

    def __init__(self, Q, R=None, x_ref=None, u_ref=None) -> None:
        self.Q = np.asarray(Q, dtype=float)
        self.R = None if R is None else np.asarray(R, dtype=float)
        n = self.Q.shape[0]
        self.x_ref = np.zeros(n) if x_ref is None else np.asarray(x_ref, dtype=float)
        m = 0 if self.R is None else self.R.shape[0]
        self.u_ref = np.zeros(m) if u_ref is None else np.asarray(u_ref, dtype=float)

    def stage(self, x, u, t: int = 0) -> float:
        dx = x - self.x_ref
        du = u - self.u_ref
        return float(dx @ self.Q @ dx + du @ self.R @ du)

    def stage_derivatives(self, X: np.ndarray, U: np.ndarray) -> StageDerivatives:
        T = len(U)
        dX = X[:T] - self.x_ref
        dU = U - self.u_ref
        n, m = self.Q.shape[0], self.R.shape[0]
        return StageDerivatives(
            lx=2.0 * dX @ self.Q.T,
            lu=2.0 * dU @ self.R.T,
            lxx=np.broadcast_to(2.0 * self.Q, (T, n, n)),
            luu=np.broadcast_to(2.0 * self.R, (T, m, m)),
            lux=np.zeros((T, m, n)),
        )

    def final(self, x) -> float:
        dx = x - self.x_ref
        return float(dx @ self.Q @ dx)

    def final_derivatives(self, x) -> tuple[np.ndarray, np.ndarray]:
        return 2.0 * self.Q @ (x - self.x_ref), 2.0 * self.Q


@dataclass
class OcProblem:
    """Finite-horizon optimal control problem.

    ``dynamics`` follows :class:`nnilqr.plants.DynamicsModel` (``step``, ``linearize``).
    ``stage_cost`` must provide ``stage(x, u, t)`` and ``stage_derivatives(X, U)``;
    ``final_cost`` must provide ``final(x)`` and ``final_derivatives(x)``.
    """

    dynamics: object
    stage_cost: object
    final_cost: object
    x0: np.ndarray
    horizon: int
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self) -> None:
        self.x0 = np.asarray(self.x0, dtype=float)
        self.u_min = np.asarray(self.u_min, dtype=float)
        self.u_max = np.asarray(self.u_max, dtype=float)
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("u_min must be strictly below u_max")

    @property
    def n(self) -> int:
        return self.x0.size

    @property
    def m(self) -> int:
        return self.u_min.size

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(u, self.u_min), self.u_max)

    def rollout(self, U: np.ndarray) -> np.ndarray:
        X = np.empty((self.horizon, self.n))
        X[0] = self.x0
        for i in range(self.horizon - 1):
            X[i + 1] = self.dynamics.step(X[i], U[i], i)
        return X

    def cost(self, X: np.ndarray, U: np.ndarray) -> float:
        if hasattr(self.stage_cost, "stage_total"):
            return self.stage_cost.stage_total(X, U) + self.final_cost.final(X[-1])
        total = 0.0
        for i in range(len(U)):
            total += self.stage_cost.stage(X[i], U[i], i)
        return total + self.final_cost.final(X[-1])


@dataclass
class NominalTrajectory:
    X: np.ndarray  # (N, n)
    U: np.ndarray  # (N-1, m)


@dataclass
class GainSchedule:
    k: np.ndarray  # (N-1, m) feedforward
    K: np.ndarray  # (N-1, m, n) feedback
    dV: tuple[float, float] = (0.0, 0.0)  # expected change: alpha * dV[0] + alpha^2 * dV[1]

    def expected_change(self, alpha: float) -> float:
        return alpha * self.dV[0] + alpha * alpha * self.dV[1]


@dataclass(frozen=True)
class SolverConfig:
    mu_init: float = 1e-6
    mu_min: float = 1e-6
    mu_max: float = 1e10
    mu_up: float = 10.0
    mu_down: float = 2.0
    alphas: tuple[float, ...] = tuple(2.0**-i for i in range(11))
    max_iterations: int = 100
    cost_tolerance: float = 1e-6
    ratio_test: bool = False  # optional expected-improvement acceptance test
    min_ratio: float = 1e-4
    clamp_active: bool = True  # freeze controls held at a bound by the gradient in the backward pass

    def __post_init__(self) -> None:
        if not (self.mu_min > 0 and self.mu_max > self.mu_min and self.mu_init >= 0):
            raise ValueError("invalid regularization bounds")
        if self.mu_up <= 1 or self.mu_down <= 1:
            raise ValueError("regularization factors must exceed 1")
        a = self.alphas
        if not a or any(x <= 0 or x > 1 for x in a) or any(b >= c for c, b in zip(a, a[1:])):
            raise ValueError("alphas must be strictly decreasing within (0, 1]")


@dataclass
class IlqrSolution:
    trajectory: NominalTrajectory
    gains: GainSchedule
    cost: float
    iterations: int
    converged: bool
    cost_history: list[float] = field(default_factory=list)
    mu: float = 0.0


class NotPositiveDefinite(Exception):
    pass


def backward_pass(
    problem: OcProblem, traj: NominalTrajectory, mu: float, linearization=None, clamp_active: bool = False
) -> GainSchedule:
    """Riccati-like sweep producing feedforward ``k`` and feedback ``K`` gains.

    Regularization adds ``mu * I`` to the value Hessian wherever it is mapped
    through ``f_u``. Raises :class:`NotPositiveDefinite` when a regularized
    ``Q_uu`` fails to factor.

    With ``clamp_active``, a control sitting on a bound whose gradient ``Q_u``
    points outward gets zero feedforward and feedback; the remaining controls
    solve the reduced system. Clipping alone would discard that part of the
    step and leave the predicted improvement unreachable.
    """
    X, U = traj.X, traj.U
    T = len(U)
    n, m = problem.n, problem.m
    fx, fu = linearization if linearization is not None else problem.dynamics.linearize(X, U)
    d = problem.stage_cost.stage_derivatives(X, U)
    Vx, Vxx = problem.final_cost.final_derivatives(X[-1])
    Vx = np.array(Vx, dtype=float)
    Vxx = np.array(Vxx, dtype=float)
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fu)) and np.all(np.isfinite(Vxx))):
        raise FloatingPointError("non-finite derivatives in backward pass")
    k = np.empty((T, m))
    K = np.empty((T, m, n))
    dV1 = 0.0
    dV2 = 0.0
    # stacked z = (x, u) blocks so each step needs one congruence product
    F = np.concatenate([fx, fu], axis=2)
    lz = np.concatenate([d.lx, d.lu], axis=1)
    lzz = np.empty((T, n + m, n + m))
    lzz[:, :n, :n] = d.lxx
    lzz[:, n:, n:] = d.luu
    lzz[:, n:, :n] = d.lux
    lzz[:, :n, n:] = np.swapaxes(d.lux, 1, 2)
    if clamp_active:
        span = problem.u_max - problem.u_min
        at_lo = U <= problem.u_min + 1e-9 * span
        at_hi = U >= problem.u_max - 1e-9 * span
    for i in range(T - 1, -1, -1):
        Fi = F[i]
        Q = lzz[i] + Fi.T @ (Vxx @ Fi)
        q = lz[i] + Fi.T @ Vx
        Qx, Qu = q[:n], q[n:]
        Qxx, Quu, Qux = Q[:n, :n], Q[n:, n:], Q[n:, :n]
        if mu > 0.0:
            # mu * I on V_xx as seen through f_u
            reg = mu * (Fi[:, n:].T @ Fi)
            Quu_r = Quu + reg[:, n:]
            Qux_r = Qux + reg[:, :n]
        else:
            Quu_r, Qux_r = Quu, Qux
        Quu_r = 0.5 * (Quu_r + Quu_r.T)
        rhs = np.empty((m, n + 1))
        rhs[:, 0] = Qu
        rhs[:, 1:] = Qux_r
        held = None
        if clamp_active:
            held = (at_lo[i] & (Qu > 0.0)) | (at_hi[i] & (Qu < 0.0))
            if not held.any():
                held = None
        chol, info = dpotrf(Quu_r, lower=1)
        if info != 0:
            raise NotPositiveDefinite(f"Q_uu not positive definite at step {i}")
        if held is None:
            sol, _ = dpotrs(chol, rhs, lower=1)
        else:
            free = ~held
            sol = np.zeros((m, n + 1))
            if free.any():
                sub, _ = dpotrf(Quu_r[np.ix_(free, free)], lower=1)
                sol[free], _ = dpotrs(sub, rhs[free], lower=1)
        ki = -sol[:, 0]
        Ki = -sol[:, 1:]
        k[i] = ki
        K[i] = Ki
        M = Quu @ Ki + Qux  # (m, n)
        Vx = Qx + M.T @ ki + Ki.T @ Qu
        Vxx = Qxx + Ki.T @ M + Qux.T @ Ki
        Vxx = 0.5 * (Vxx + Vxx.T)
        dV1 += float(ki @ Qu)
        dV2 += 0.5 * float(ki @ Quu @ ki)
    return GainSchedule(k=k, K=K, dV=(dV1, dV2))


def forward_pass(
    problem: OcProblem, traj: NominalTrajectory, gains: GainSchedule, alpha: float
) -> tuple[NominalTrajectory, float]:
    """Roll out ``u = u_nom + alpha k + K (x - x_nom)``, clipping before propagation.

    Returns cost ``inf`` if the rollout leaves finite values.
    """
    X, U = traj.X, traj.U
    T = len(U)
    Xn = np.empty_like(X)
    Un = np.empty_like(U)
    Xn[0] = X[0]
    x = Xn[0]
    dyn = problem.dynamics
    lo, hi = problem.u_min, problem.u_max
    for i in range(T):
        u = U[i] + alpha * gains.k[i] + gains.K[i] @ (x - X[i])
        u = np.minimum(np.maximum(u, lo), hi)
        Un[i] = u
        x = dyn.step(x, u, i)
        if not np.all(np.isfinite(x)):
            return NominalTrajectory(Xn, Un), math.inf
        Xn[i + 1] = x
    new = NominalTrajectory(Xn, Un)
    return new, problem.cost(Xn, Un)


def forward_pass_batch(
    problem: OcProblem, traj: NominalTrajectory, gains: GainSchedule, alphas
) -> list[tuple[NominalTrajectory, float]]:
    """:func:`forward_pass` for several step sizes at once via ``dynamics.step_batch``."""
    X, U = traj.X, traj.U
    a = np.asarray(alphas, dtype=float)
    B = a.size
    T = len(U)
    Xn = np.empty((B, T + 1, X.shape[1]))
    Un = np.empty((B, T, U.shape[1]))
    Xn[:, 0] = X[0]
    lo, hi = problem.u_min, problem.u_max
    step = problem.dynamics.step_batch
    bad = np.zeros(B, dtype=bool)
    for i in range(T):
        dx = Xn[:, i] - X[i]
        u = U[i] + a[:, None] * gains.k[i] + dx @ gains.K[i].T
        u = np.minimum(np.maximum(u, lo), hi)
        Un[:, i] = u
        with np.errstate(all="ignore"):
            Xn[:, i + 1] = step(Xn[:, i], u, i)
        bad |= ~np.all(np.isfinite(Xn[:, i + 1]), axis=1)
        if bad.any():
            Xn[bad, i + 1] = X[i + 1]  # keep the batch finite; flagged rows cost inf
    out = []
    for j in range(B):
        cand = NominalTrajectory(Xn[j], Un[j])
        out.append((cand, math.inf if bad[j] else problem.cost(Xn[j], Un[j])))
    return out


def _line_search(problem, traj, bp, J, cfg):
    """First step size in ``cfg.alphas`` whose rollout lowers the cost (and passes the ratio test)."""

    def ok(alpha, J_new):
        if not J_new < J:
            return False
        if cfg.ratio_test:
            exp_a = -bp.expected_change(alpha)
            if exp_a > 0 and (J - J_new) / exp_a < cfg.min_ratio:
                return False
        return True

    alphas = list(cfg.alphas)
    batched = hasattr(problem.dynamics, "step_batch")
    cand, J_new = forward_pass(problem, traj, bp, alphas[0])
    if ok(alphas[0], J_new):
        return alphas[0], cand, J_new
    rest = alphas[1:]
    results = forward_pass_batch(problem, traj, bp, rest) if batched and rest else None
    for j, alpha in enumerate(rest):
        cand, J_new = results[j] if results is not None else forward_pass(problem, traj, bp, alpha)
        if ok(alpha, J_new):
            return alpha, cand, J_new
    return None, None, None


def solve(
    problem: OcProblem,
    initial_controls: np.ndarray,
    config: SolverConfig | None = None,
    trace: Optional[TextIO] = None,
    on_iteration: Optional[Callable[[dict], None]] = None,
) -> IlqrSolution:
    """Run ILQR from ``initial_controls`` (clipped on entry).

    ``trace`` receives one JSON line per iteration with iteration, mu, alpha and cost.
    """
    cfg = config or SolverConfig()
    U = problem.clip(np.asarray(initial_controls, dtype=float).reshape(problem.horizon - 1, problem.m))
    X = problem.rollout(U)
    traj = NominalTrajectory(X, U)
    J = problem.cost(X, U)
    if not math.isfinite(J):
        raise FloatingPointError("initial rollout has non-finite cost")
    history = [J]
    mu = cfg.mu_init
    gains: Optional[GainSchedule] = None
    converged = False
    iterations = 0

    def emit(alpha, cost, accepted):
        rec = {"iteration": iterations, "mu": mu, "alpha": alpha, "cost": cost, "accepted": accepted}
        if trace is not None:
            trace.write(json.dumps(rec) + "\n")
        if on_iteration is not None:
            on_iteration(rec)

    while iterations < cfg.max_iterations:
        iterations += 1
        lin = problem.dynamics.linearize(traj.X, traj.U)
        # regularize until the backward pass factors
        while True:
            try:
                bp = backward_pass(problem, traj, mu, lin, cfg.clamp_active)
                break
            except NotPositiveDefinite:
                mu = max(mu * cfg.mu_up, cfg.mu_min)
                if mu > cfg.mu_max:
                    log.warning("ILQR: regularization exceeded mu_max in backward pass")
                    return _finish(traj, gains, problem, J, iterations, False, history, mu)
        gains = bp
        expected = -bp.expected_change(1.0)
        scale = max(abs(J), 1e-12)
        if 0.0 <= expected < cfg.cost_tolerance * scale:
            converged = True
            emit(0.0, J, False)
            break
        alpha, cand, J_new = _line_search(problem, traj, bp, J, cfg)
        accepted = alpha is not None
        if accepted:
            rel = (J - J_new) / scale
            traj, J = cand, J_new
            history.append(J)
            emit(alpha, J, True)
            mu = mu / cfg.mu_down
            if mu < cfg.mu_min:
                mu = 0.0
            if rel < cfg.cost_tolerance:
                converged = True
                break
        else:
            emit(None, J, False)
            if expected <= cfg.cost_tolerance * scale:
                converged = True
                break
            mu = max(mu * cfg.mu_up, cfg.mu_min)
            if mu > cfg.mu_max:
                log.warning("ILQR: line search failed with mu at its maximum")
                break
    return _finish(traj, gains, problem, J, iterations, converged, history, mu)


def _finish(traj, gains, problem, J, iterations, converged, history, mu) -> IlqrSolution:
    if gains is None:
        T = problem.horizon - 1
        gains = GainSchedule(np.zeros((T, problem.m)), np.zeros((T, problem.m, problem.n)))
    return IlqrSolution(
        trajectory=traj,
        gains=gains,
        cost=J,
        iterations=iterations,
        converged=converged,
        cost_history=history,
        mu=mu,
    )
