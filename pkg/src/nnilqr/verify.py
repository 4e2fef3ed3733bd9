"""Oracle suites behind ``nnilqr verify``.

Each suite checks production code against an independent reference: a
discrete Riccati recursion, central finite differences, dense-sampling
argmin, a symbolic re-derivation of the error transition, hand arithmetic and
plant closed forms. The oracles here deliberately do not call the code paths
they check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .geometry import Waypoint, fit_cubic_spline, heading_error
from .ilqr import OcProblem, QuadraticCost, SolverConfig, solve
from .neural import MlpModel, Whitener, load_model, mlp_backward, mse_loss
from .plants import (
    GemPlantParams,
    LinearModel,
    WarthogPlant,
    WarthogPlantParams,
    finite_diff_jacobians,
    gem_plant_step,
    warthog_plant_step,
)
from .sim import EmptyLogError, compute_metrics
from .tracking import GEM_WEIGHTS, BicycleParams, TrackingCost, gamma_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0
    error: str = ""

    @property
    def passed(self) -> bool:
        return not self.error and all(c.passed for c in self.checks)

    def check(self, name: str, ok: bool, detail: str = "") -> bool:
        self.checks.append(CheckResult(name, bool(ok), detail))
        return bool(ok)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


# -- riccati ------------------------------------------------------------------------


def riccati_lqr(A, B, Q, R, Qf, N: int):
    """Finite-horizon discrete LQR by backward Riccati recursion.

    Costs ``sum x'Qx + u'Ru + x_N'Qf x_N`` over ``N-1`` controls. Returns gains
    ``K[i]`` (``u = K x``) and ``P0`` so the optimal cost from ``x0`` is ``x0' P0 x0``.
    """
    P = np.asarray(Qf, dtype=float)
    gains = []
    for _ in range(N - 1):
        S = R + B.T @ P @ B
        K = -np.linalg.solve(S, B.T @ P @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
        P = 0.5 * (P + P.T)
        gains.append(K)
    return gains[::-1], P


def random_lq_problem(seed: int = 0, n: int = 9, m: int = 3, N: int = 40):
    rng = np.random.default_rng(seed)
    A = np.eye(n) + 0.1 * rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    Q = np.diag(rng.uniform(0.5, 2.0, n))
    R = np.diag(rng.uniform(0.5, 2.0, m))
    x0 = rng.normal(size=n)
    U0 = rng.normal(size=(N - 1, m))
    cost = QuadraticCost(Q, R)
    big = np.full(m, 1e9)
    problem = OcProblem(LinearModel(A, B), cost, cost, x0, N, -big, big)
    return problem, U0, (A, B, Q, R)


def suite_riccati(seed: int = 0) -> SuiteResult:
    res = SuiteResult("riccati")
    problem, U0, (A, B, Q, R) = random_lq_problem(seed)
    t0 = time.perf_counter()
    sol = solve(problem, U0, SolverConfig(mu_init=0.0))
    elapsed = time.perf_counter() - t0
    gains, P0 = riccati_lqr(A, B, Q, R, Q, problem.horizon)
    J_star = float(problem.x0 @ P0 @ problem.x0)
    res.check("iterations <= 2", sol.iterations <= 2 and sol.converged, f"{sol.iterations} iterations")
    e_cost = abs(sol.cost - J_star) / J_star
    res.check("optimal cost rel. error <= 1e-8", e_cost <= 1e-8, f"{e_cost:.2e}")
    e_gain = max(rel_err(sol.gains.K[i], gains[i]) for i in range(len(gains)))
    res.check("feedback gains rel. error <= 1e-8", e_gain <= 1e-8, f"{e_gain:.2e}")
    res.check("runtime < 1 s", elapsed < 1.0, f"{elapsed:.3f} s")
    return res


# -- gradients ----------------------------------------------------------------------


def fd_param_grads(model: MlpModel, Zin, Tout, eps: float = 1e-4) -> dict[str, np.ndarray]:
    out = {}
    for name in MlpModel.PARAM_NAMES:
        P = getattr(model, name)
        g = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            keep = P[idx]
            P[idx] = keep + eps
            lp = mse_loss(model, Zin, Tout)
            P[idx] = keep - eps
            lm = mse_loss(model, Zin, Tout)
            P[idx] = keep
            g[idx] = (lp - lm) / (2 * eps)
        out[name] = g
    return out


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise relative error, measured against the larger magnitude with an absolute floor."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _kink_margin(model: MlpModel, z) -> float:
    z1 = model.W1 @ z + model.b1
    z2 = model.W2 @ np.maximum(z1, 0.0) + model.b2
    return float(min(np.min(np.abs(z1)), np.min(np.abs(z2))))


def suite_gradient(seed: int = 0, model_path: Optional[str | Path] = None) -> SuiteResult:
    res = SuiteResult("gradient")
    rng = np.random.default_rng(seed)
    # MLP parameter gradients on a random 8-sample batch
    model = MlpModel.init(2, 3, rng)
    model.b1[...] = rng.normal(0, 0.1, model.b1.shape)
    model.b2[...] = rng.normal(0, 0.1, model.b2.shape)
    Zin = rng.normal(size=(8, 5))
    Tout = rng.normal(size=(8, 2))
    _, g = mlp_backward(model, Zin, Tout)
    num = fd_param_grads(model, Zin, Tout)
    worst = max(grad_rel_error(g[k], num[k]) for k in g)
    res.check("MLP parameter gradients vs central differences (rel <= 1e-4)", worst <= 1e-4, f"{worst:.2e}")

    # stage / final cost derivatives
    cost = TrackingCost(GEM_WEIGHTS)
    worst = 0.0
    for _ in range(5):
        x = rng.normal(size=9)
        u = rng.normal(size=3)
        d = cost.stage_derivatives(x[None], u[None])
        h = 1e-5
        gx = np.array([(cost.stage(x + h * e, u) - cost.stage(x - h * e, u)) / (2 * h) for e in np.eye(9)])
        gu = np.array([(cost.stage(x, u + h * e) - cost.stage(x, u - h * e)) / (2 * h) for e in np.eye(3)])
        Hx = np.array([(cost.stage_derivatives((x + h * e)[None], u[None]).lx[0] - cost.stage_derivatives((x - h * e)[None], u[None]).lx[0]) / (2 * h) for e in np.eye(9)])
        fx, fxx = cost.final_derivatives(x)
        gf = np.array([(cost.final(x + h * e) - cost.final(x - h * e)) / (2 * h) for e in np.eye(9)])
        worst = max(
            worst,
            grad_rel_error(d.lx[0], gx),
            grad_rel_error(d.lu[0], gu),
            grad_rel_error(d.lxx[0], Hx),
            grad_rel_error(fx, gf),
            grad_rel_error(fxx, np.asarray(d.lxx[0])),
        )
    res.check("cost derivatives vs central differences (rel <= 1e-4)", worst <= 1e-4, f"{worst:.2e}")

    # trained model: finite parameters and analytic Jacobians away from ReLU kinks
    if model_path is None:
        from .config import bundled_model_path

        model_path = bundled_model_path("gem")
    try:
        trained = load_model(model_path)
    except Exception as exc:  # noqa: BLE001 - any load failure fails the suite
        res.check(f"load model {model_path}", False, f"{type(exc).__name__}: {exc}")
        return res
    res.check(f"model {Path(model_path).name} parameters finite", trained.is_finite())
    lo = trained.input_whitener.mean - trained.input_whitener.std
    hi = trained.input_whitener.mean + trained.input_whitener.std
    worst, tested = 0.0, 0
    for _ in range(400):
        xu = rng.uniform(lo, hi)
        z = (xu - trained.input_whitener.mean) / trained.input_whitener.std
        if _kink_margin(trained, z) < 1e-3:
            continue
        x, u = xu[: trained.n], xu[trained.n :]
        fx, fu = trained.jacobians(x, u)
        nx, nu = finite_diff_jacobians(trained, x, u, eps=1e-7)
        worst = max(worst, grad_rel_error(np.hstack([fx, fu]), np.hstack([nx, nu]), floor=1e-3))
        tested += 1
        if tested >= 100:
            break
    ok = tested > 0 and worst <= 1e-5 and math.isfinite(worst)
    res.check("model Jacobians vs central differences (rel <= 1e-5)", ok, f"{worst:.2e} over {tested} points")
    return res


# -- projection ---------------------------------------------------------------------


def dense_argmin(qx: float, qy: float, s_grid: np.ndarray, pts: np.ndarray) -> float:
    d2 = (pts[:, 0] - qx) ** 2 + (pts[:, 1] - qy) ** 2
    return float(s_grid[int(np.argmin(d2))])


def suite_projection(seed: int = 0, samples: int = 1_000_000, queries: int = 200) -> SuiteResult:
    res = SuiteResult("projection")
    line = fit_cubic_spline([Waypoint(0, 0, 1), Waypoint(1, 0, 1), Waypoint(2, 0, 1)])
    p = line.project(1.0, 0.5)
    res.check(
        "straight line: (1, 0.5) -> s=1, d_e=+0.5, theta_ref=0",
        abs(p.s_star - 1.0) < 1e-9 and abs(p.d_e - 0.5) < 1e-9 and abs(p.theta_ref) < 1e-9,
        f"s={p.s_star:.12f} d={p.d_e:.12f}",
    )
    p = line.project(1.3, 0.0)
    res.check("point on path -> d_e = 0", abs(p.d_e) < 1e-9, f"{p.d_e:.2e}")
    res.check(
        "heading_error examples",
        abs(heading_error(0.1, 0.0) - 0.1) < 1e-12
        and abs(heading_error(-3.0, 3.0) - (2 * math.pi - 6.0)) < 1e-12
        and heading_error(math.pi, math.pi) == 0.0,
    )

    # snake y = 3 sin(2 pi x / 30), length 120
    xs = np.linspace(0.0, 120.0, 65)
    snake = fit_cubic_spline([Waypoint(x, 3.0 * math.sin(2 * math.pi * x / 30.0), 5.0) for x in xs])
    s_grid = np.linspace(0.0, snake.total_length, samples)
    pts = snake.position(s_grid)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(queries):
        s0 = rng.uniform(1.0, snake.total_length - 1.0)
        x0, y0 = snake.position(s0)
        th = snake.heading(s0)
        off = rng.uniform(-2.0, 2.0)
        qx, qy = x0 - off * math.sin(th), y0 + off * math.cos(th)
        s_or = dense_argmin(qx, qy, s_grid, pts)
        s_pr = snake.project(qx, qy).s_star
        worst = max(worst, abs(s_pr - s_or))
    res.check(f"{queries} snake queries vs {samples}-point argmin (<= 1 cm)", worst <= 0.01, f"max |ds| = {worst:.2e} m")
    return res


# -- error transition (dual implementation) --------------------------------------


def symbolic_gamma():
    """The error-state transition written out in sympy, independent of ``gamma_step``.

    Returns a callable ``(psi, v_next, phid_next, v_p, dt, L) -> 9 values`` evaluated
    by sympy in exact arithmetic and rounded to float.
    """
    import sympy as sp

    d, th, ve, dd, dth, dve, v, phid, phi = sp.symbols("d th ve dd dth dve v phid phi", real=True)
    v2, phid2, vp, dt, L = sp.symbols("v2 phid2 vp dt L", real=True)
    w = ve + dve * dt + vp
    out = [
        d + dd * dt,
        th + dth * dt,
        ve + dve * dt,
        w * sp.sin(th + dth * dt),
        w * sp.tan(phi + phid * dt) / L,
        (v2 - v) / dt,
        v2,
        phid2,
        phi + phid * dt,
    ]
    syms = (d, th, ve, dd, dth, dve, v, phid, phi, v2, phid2, vp, dt, L)

    def evaluate(psi, v_next, phid_next, v_p, dt_val, L_val):
        vals = [sp.Float(repr(float(x)), 30) for x in (*psi, v_next, phid_next, v_p, dt_val, L_val)]
        subs = dict(zip(syms, vals))
        return np.array([float(e.evalf(30, subs=subs)) for e in out])

    return evaluate


class _FixedModel:
    """Stand-in learned model returning fixed next ``(v, phi_dot)``; records inputs."""

    def __init__(self, nxt):
        self.nxt = np.asarray(nxt, dtype=float)

    def step(self, x, u, t=0):
        return self.nxt.copy()


def suite_gamma(seed: int = 0, cases: int = 50, model: Optional[MlpModel] = None) -> SuiteResult:
    res = SuiteResult("gamma")
    evaluate = symbolic_gamma()
    rng = np.random.default_rng(seed)
    params = BicycleParams()
    worst = 0.0
    for _ in range(cases):
        psi = rng.normal(size=9) * np.array([1, 0.3, 1, 1, 0.3, 1, 3, 0.3, 0.3])
        psi[6] = abs(psi[6])
        u = np.array([rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(-1, 1)])
        nxt = (abs(rng.normal(3.0)), rng.normal(0, 0.3))
        v_p = rng.uniform(0, 10)
        got = gamma_step(psi, u, _FixedModel(nxt), params, v_p)
        want = evaluate(psi, nxt[0], nxt[1], v_p, params.dt, params.L)
        worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want)))))
    res.check(f"{cases} random cases vs symbolic transition (<= 1e-12)", worst <= 1e-12, f"{worst:.2e}")

    # structural identities
    psi = rng.normal(size=9)
    dt = params.dt
    fm = _FixedModel((1.0, 0.0))
    ok = True
    for j, rate in ((0, 3), (1, 4), (2, 5)):
        for k in range(9):
            e = np.zeros(9)
            e[k] = 1.0
            diff = gamma_step(psi + e, np.zeros(3), fm, params, 2.0)[j] - gamma_step(psi, np.zeros(3), fm, params, 2.0)[j]
            want = 1.0 if k == j else (dt if k == rate else 0.0)
            ok &= abs(diff - want) < 1e-12
    res.check("first three components affine (1 on self, dt on rate)", ok)
    a = gamma_step(psi, np.array([0.0, 0.0, 0.3]), fm, params, 2.0)[8]
    b = gamma_step(psi, np.array([1.0, 1.0, 0.3]), fm, params, 2.0)[8]
    res.check("steering-angle update ignores pedal and brake", a == b)
    out = gamma_step(np.array([0, 0, 1.0, 0, 0, 0.5, 3, 0, 0]), np.zeros(3), fm, params, 4.0)
    res.check("theta_e = phi = phi_dot = 0 -> d_e_dot' = theta_e_dot' = 0", out[3] == 0.0 and out[4] == 0.0)
    return res


# -- metrics ------------------------------------------------------------------------


def suite_metrics() -> SuiteResult:
    res = SuiteResult("metrics")
    m = compute_metrics([0.1, -0.3, 0.2], [1.0, 0.0, -1.0])
    want = (0.2, 0.3, 2.0 / 3.0, 1.0)
    got = (m.ace, m.mce, m.ave, m.mve)
    res.check(
        "3-step log -> ACE 0.2, MCE 0.3, AVE 2/3, MVE 1",
        all(abs(g - w) <= 1e-15 for g, w in zip(got, want)),
        str(tuple(round(x, 17) for x in got)),
    )
    m = compute_metrics(np.zeros(10), np.zeros(10))
    res.check("perfect tracking -> all zero", (m.ace, m.mce, m.ave, m.mve) == (0.0, 0.0, 0.0, 0.0))
    try:
        compute_metrics([], [])
        res.check("empty log rejected", False)
    except EmptyLogError:
        res.check("empty log rejected", True)
    rng = np.random.default_rng(0)
    d, v = rng.normal(size=100), rng.normal(size=100)
    m = compute_metrics(d, v)
    res.check("MCE >= ACE and MVE >= AVE", m.mce >= m.ace >= 0 and m.mve >= m.ave >= 0)
    return res


# -- plants -------------------------------------------------------------------------


def suite_plants() -> SuiteResult:
    res = SuiteResult("plants")
    wp = WarthogPlantParams(tau_v=0.5, dt=0.05)
    res.check("warthog v=0, v_cmd=0 -> 0", warthog_plant_step((0.0, 0.0), (0.0, 0.0), wp)[0] == 0.0)
    v1 = warthog_plant_step((0.0, 0.0), (2.0, 0.0), wp)[0]
    res.check("warthog v_cmd=2 -> 2(1 - e^-0.1)", abs(v1 - 2.0 * (1.0 - math.exp(-0.1))) <= 1e-15, f"{v1:.16f}")
    x = (0.0, 0.0)
    for _ in range(100):
        x = warthog_plant_step(x, (3.0, 0.0), wp)
    closed = 3.0 * (1.0 - math.exp(-0.1) ** 100)
    res.check("warthog 100 steps at v_cmd=3 -> geometric limit", abs(x[0] - closed) <= 1e-12 and abs(x[0] - 3.0) < 1e-3, f"{x[0]:.12f}")
    gp = GemPlantParams(brake_gain=4.0, drag=0.05)
    v = gem_plant_step((10.0, 0.0), (0.0, 1.0, 0.0), gp)[0]
    res.check("gem v=10 full brake -> 9.85", abs(v - 9.85) <= 1e-12, f"{v:.15f}")
    res.check("gem coasting at rest stays at rest", gem_plant_step((0.0, 0.0), (0.0, 0.0, 0.0), GemPlantParams())[0] == 0.0)
    res.check("gem brake at rest clamps to 0", gem_plant_step((0.0, 0.0), (0.0, 1.0, 0.0), GemPlantParams())[0] == 0.0)
    plant = WarthogPlant(WarthogPlantParams())
    fx, _ = finite_diff_jacobians(plant, np.array([1.0, 0.2]), np.array([2.0, 0.3]))
    p = plant.params
    want = np.diag([math.exp(-p.dt / p.tau_v), math.exp(-p.dt / p.tau_w)])
    res.check("warthog f_x = diag(e^{-dt/tau})", np.max(np.abs(fx - want)) <= 1e-9, f"{np.max(np.abs(fx - want)):.1e}")
    rng = np.random.default_rng(1)
    A, B = rng.normal(size=(4, 4)), rng.normal(size=(4, 2))
    fx, fu = finite_diff_jacobians(LinearModel(A, B), rng.normal(size=4), rng.normal(size=2))
    res.check("finite differences recover linear A, B", max(np.max(np.abs(fx - A)), np.max(np.abs(fu - B))) <= 1e-9)
    return res


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "riccati": suite_riccati,
    "gradient": suite_gradient,
    "projection": suite_projection,
    "gamma": suite_gamma,
    "metrics": suite_metrics,
    "plants": suite_plants,
}


def run_suites(
    names: Optional[list[str]] = None, seed: int = 0, model_path: Optional[str | Path] = None
) -> list[SuiteResult]:
    selected = names or list(SUITES)
    unknown = [n for n in selected if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; available: {list(SUITES)}")
    results = []
    for name in selected:
        t0 = time.perf_counter()
        try:
            if name == "gradient":
                r = suite_gradient(seed, model_path)
            elif name in ("riccati", "projection", "gamma"):
                r = SUITES[name](seed)
            else:
                r = SUITES[name]()
        except Exception as exc:  # noqa: BLE001 - a crashing suite is a failing suite
            r = SuiteResult(name, error=f"{type(exc).__name__}: {exc}")
        r.seconds = time.perf_counter() - t0
        results.append(r)
    return results


def format_results(results: list[SuiteResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"[{status}] {r.name} ({r.seconds:.2f} s)")
        if r.error:
            lines.append(f"    error: {r.error}")
        for c in r.checks:
            mark = "ok " if c.passed else "BAD"
            lines.append(f"    {mark} {c.name}" + (f"  [{c.detail}]" if c.detail else ""))
    failed = [r.name for r in results if not r.passed]
    lines.append("all suites passed" if not failed else f"failed suites: {', '.join(failed)}")
    return "\n".join(lines)
