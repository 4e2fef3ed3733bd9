"""End-to-end acceptance checks, one test per criterion.

Each test appends a ``ACCEPTANCE #k PASS|FAIL: ...`` line that conftest echoes in
the terminal summary. The closed-loop episodes are shared across criteria and
take roughly a quarter of an hour on one core.
"""

import math
import shutil
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

import nnilqr.verify as verify
from conftest import ACCEPTANCE_LINES
from nnilqr.config import bundled_scenario_dir, load_scenario
from nnilqr.datagen import generate_dataset
from nnilqr.ilqr import OcProblem, QuadraticCost, SolverConfig, solve
from nnilqr.neural import TrainHyperparams, train_dynamics
from nnilqr.plants import GemPlantParams, LinearModel
from nnilqr.runner import run_scenario
from nnilqr.sim import NoiseSpec
from nnilqr.tracking import make_platform

pytestmark = pytest.mark.slow

SEEDS = range(10)


def report(k: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE #{k} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


class Episode:
    def __init__(self, label, cfg, result, seconds):
        self.label = label
        self.cfg = cfg
        self.result = result
        self.seconds = seconds


def _run(label, cfg, model):
    t0 = time.perf_counter()
    res = run_scenario(cfg, keep_cost_histories=True, model=model)
    return Episode(label, cfg, res, time.perf_counter() - t0)


def _bundled(name):
    return load_scenario(bundled_scenario_dir() / f"{name}.scenario")


@pytest.fixture(scope="module")
def episodes(gem_model, warthog_model):
    runs = {"circle": [], "warthog": [], "other": [], "nominal": []}
    circle = _bundled("gem_circle")
    for s in SEEDS:
        runs["circle"].append(_run(f"gem_circle seed {s}", circle.with_seed(s), gem_model))
    wart = _bundled("warthog_combination")
    for s in SEEDS:
        runs["warthog"].append(_run(f"warthog_combination seed {s}", wart.with_seed(s), warthog_model))
    for name in ("gem_oval", "gem_snake", "gem_eight", "gem_combination"):
        runs["other"].append(_run(name, _bundled(name), gem_model))
    nominal = replace(circle, noise=NoiseSpec(), plant_params=GemPlantParams(), perturbation=0.0)
    runs["nominal"].append(_run("gem_circle nominal", nominal, gem_model))
    return runs


def _all(episodes):
    return [e for group in episodes.values() for e in group]


# -- 1 -----------------------------------------------------------------------------


def riccati(A, B, Q, R, Qf, N):
    P = Qf
    Ks = []
    for _ in range(N - 1):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A + B @ K)
        P = 0.5 * (P + P.T)
        Ks.append(K)
    return Ks[::-1], P


def test_1_riccati_equivalence():
    worst_cost = worst_gain = 0.0
    max_iters = 0
    all_converged = True
    slowest = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n, m, N = 9, 3, 40
        A = np.eye(n) + 0.1 * rng.normal(size=(n, n))
        B = rng.normal(size=(n, m))
        Q = np.diag(rng.uniform(0.5, 2.0, n))
        R = np.diag(rng.uniform(0.5, 2.0, m))
        Qf = np.diag(rng.uniform(1.0, 5.0, n))
        x0 = rng.normal(size=n)
        big = np.full(m, 1e9)
        problem = OcProblem(LinearModel(A, B), QuadraticCost(Q, R), QuadraticCost(Qf), x0, N, -big, big)
        t0 = time.perf_counter()
        sol = solve(problem, rng.normal(size=(N - 1, m)), SolverConfig(mu_init=0.0))
        slowest = max(slowest, time.perf_counter() - t0)
        Ks, P0 = riccati(A, B, Q, R, Qf, N)
        opt = float(x0 @ P0 @ x0)
        worst_cost = max(worst_cost, abs(sol.cost - opt) / opt)
        gains = sol.gains.K
        worst_gain = max(
            worst_gain, max(np.linalg.norm(gains[i] - Ks[i]) / np.linalg.norm(Ks[i]) for i in range(N - 1))
        )
        max_iters = max(max_iters, sol.iterations)
        all_converged &= sol.converged
    ok = all_converged and max_iters <= 2 and worst_cost <= 1e-8 and worst_gain <= 1e-8 and slowest < 1.0
    report(
        1,
        ok,
        f"5 seeded LQ problems (n=9, m=3, N=40): iterations <= {max_iters}, cost rel err {worst_cost:.1e}, "
        f"gain rel err {worst_gain:.1e}, slowest {slowest:.3f} s",
    )
    assert ok


# -- 2 -----------------------------------------------------------------------------


def test_2_gradient_fidelity():
    t0 = time.perf_counter()
    results = [verify.suite_gradient(seed) for seed in range(3)]
    seconds = time.perf_counter() - t0
    checks = [c for r in results for c in r.checks if "central differences" in c.name]
    worst = max(float(c.detail.split()[0]) for c in checks if "rel <= 1e-4" in c.name)
    ok = all(r.passed for r in results) and seconds < 10.0
    report(2, ok, f"MLP parameter and cost derivative gradients, 3 seeds: worst rel err {worst:.1e}, {seconds:.1f} s")
    assert ok


# -- 3 -----------------------------------------------------------------------------


def test_3_learned_model_accuracy():
    t0 = time.perf_counter()
    data = generate_dataset("gem", 3600.0, seed=1)
    _, rep = train_dynamics(data, TrainHyperparams(), seed=1)
    seconds = time.perf_counter() - t0
    worst = max(rep.val_rel_rms)
    ok = worst <= 0.01 and seconds <= 300.0
    per = ", ".join(f"{r:.3%}" for r in rep.val_rel_rms)
    report(3, ok, f"1 h of GEM data, held-out RMS/std per channel [{per}], {seconds:.0f} s incl. data generation")
    assert ok


# -- 4 -----------------------------------------------------------------------------


def test_4_monotone_cost_and_bounds(episodes):
    eps = _all(episodes)
    increases = 0
    solves = 0
    violations = 0
    controls = 0
    for e in eps:
        for h in e.result.cost_histories:
            solves += 1
            increases += sum(b > a for a, b in zip(h, h[1:]))
        plat = make_platform(e.cfg.platform)
        U = np.column_stack([e.result.log[f"u_{f}"] for f in plat.control_fields])
        controls += len(U)
        violations += int(np.sum(np.any((U < plat.u_min) | (U > plat.u_max), axis=1)))
    ok = increases == 0 and violations == 0 and solves > 0
    report(
        4,
        ok,
        f"{len(eps)} episodes over all bundled scenarios: {solves} solves, {increases} cost increases; "
        f"{controls - violations}/{controls} applied controls within bounds",
    )
    assert ok


# -- 5 -----------------------------------------------------------------------------


def test_5_nominal_tracking(episodes):
    (e,) = episodes["nominal"]
    m = e.result.metrics_after(5.0)
    ok = m.ace <= 0.10 and m.mce <= 0.30 and not e.result.aborted
    report(5, ok, f"noise-free circle at 7 m/s, matching plant, after 5 s: ACE {m.ace:.3f} m, MCE {m.mce:.3f} m")
    assert ok


# -- 6 -----------------------------------------------------------------------------


def test_6_degraded_tracking(episodes):
    eps = episodes["circle"]
    aces = [e.result.metrics.ace for e in eps]
    med = float(np.median(aces))
    slowest = max(e.seconds for e in eps)
    ok = med <= 0.45 and slowest <= 120.0 and not any(e.result.aborted for e in eps)
    report(
        6,
        ok,
        f"circle, 0.25 m noise, +/-20% plant, 10 seeds: median ACE {med:.3f} m "
        f"(range {min(aces):.3f}-{max(aces):.3f}), slowest episode {slowest:.0f} s",
    )
    assert ok


# -- 7 -----------------------------------------------------------------------------


def test_7_warthog_tracking(episodes):
    eps = episodes["warthog"]
    aces = [e.result.metrics.ace for e in eps]
    med = float(np.median(aces))
    ok = med <= 0.35 and not any(e.result.aborted for e in eps)
    report(
        7,
        ok,
        f"Warthog combination track 3-4 m/s, noise as #6, 10 seeds: median ACE {med:.3f} m "
        f"(range {min(aces):.3f}-{max(aces):.3f})",
    )
    assert ok


# -- 8 -----------------------------------------------------------------------------


def test_8_start_transient(episodes):
    eps = _all(episodes)
    start_ref = []
    mves = []
    for e in eps:
        log = e.result.log
        speed_key = "true_v"
        start_ref.append(float(log[speed_key][0] - log["v_e"][0]))
        assert log[speed_key][0] == 0.0
        mves.append(e.result.metrics.mve)
    ok = min(mves) >= 1.0 and all(1.0 <= v <= 2.0 for v in start_ref)
    report(
        8,
        ok,
        f"{len(eps)} episodes from rest, reference start speeds {min(start_ref):.2f}-{max(start_ref):.2f} m/s: "
        f"min MVE {min(mves):.2f} m/s",
    )
    assert ok


# -- 9 -----------------------------------------------------------------------------


def test_9_verify_command():
    exe = shutil.which("nnilqr")
    cmd = [exe, "verify"] if exe else [sys.executable, "-m", "nnilqr.cli", "verify"]
    t0 = time.perf_counter()
    proc = subprocess.run(cmd, capture_output=True, text=True, timeout=600)
    seconds = time.perf_counter() - t0
    suites = [ln.split()[1] for ln in proc.stdout.splitlines() if ln.startswith("[PASS]")]
    ok = proc.returncode == 0 and seconds <= 120.0 and math.isfinite(seconds)
    report(9, ok, f"`nnilqr verify` exit {proc.returncode} in {seconds:.1f} s, suites passed: {', '.join(suites)}")
    assert ok, proc.stdout + proc.stderr
