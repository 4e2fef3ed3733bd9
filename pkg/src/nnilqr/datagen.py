"""Scripted excitation of the synthetic plants to produce training logs.

Stands in for an operator driving the vehicle with a joystick: a random
target speed is tracked by a noisy feedback law, and the steering / yaw
channel follows a mix of steps, ramps and band-limited noise. Occasional
raw random commands (including simultaneous pedal and brake) widen the
input coverage.
"""

from __future__ import annotations

import math

import numpy as np

from .neural import TransitionDataset
from .plants import (
    GEM_PHI_DOT_MAX,
    WARTHOG_OMEGA_MAX,
    WARTHOG_V_MAX,
    GemPlantParams,
    WarthogPlantParams,
    gem_plant_step,
    warthog_plant_step,
)

GEM_V_ENVELOPE = 11.0  # [m/s] top of the speed range visited while collecting data
EPISODE_SECONDS = 120.0


class _Channel:
    """Piecewise command generator: holds, steps and ramps plus band-limited noise."""

    def __init__(self, rng: np.random.Generator, lo: float, hi: float, dt: float, noise: float) -> None:
        self.rng, self.lo, self.hi, self.dt = rng, lo, hi, dt
        self.level = 0.0
        self.start = 0.0
        self.target = 0.0
        self.mode = "hold"
        self.left = 0
        self.length = 1
        self.noise = noise
        self.filt = 0.0
        self.a = math.exp(-dt / 0.3)

    def __call__(self) -> float:
        if self.left <= 0:
            self.length = self.left = max(1, int(round(self.rng.uniform(0.3, 3.0) / self.dt)))
            self.mode = self.rng.choice(["hold", "step", "ramp"], p=[0.2, 0.45, 0.35])
            self.start = self.level
            self.target = self.rng.uniform(self.lo, self.hi)
        self.left -= 1
        if self.mode == "step":
            self.level = self.target
        elif self.mode == "ramp":
            self.level = self.start + (self.target - self.start) * (self.length - self.left) / self.length
        self.filt = self.a * self.filt + self.rng.normal(0.0, self.noise * math.sqrt(1 - self.a**2))
        return min(max(self.level + self.filt, self.lo), self.hi)


def gem_excitation(
    params: GemPlantParams, seconds: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One GEM recording: states (T+1, 2) of (v, phi_dot) and controls (T, 3)."""
    steps = int(round(seconds / params.dt))
    speed_target = _Channel(rng, 0.0, GEM_V_ENVELOPE, params.dt, 0.5)
    steer = _Channel(rng, -GEM_PHI_DOT_MAX, GEM_PHI_DOT_MAX, params.dt, 0.15)
    states = np.empty((steps + 1, 2))
    controls = np.empty((steps, 3))
    v, phi_dot = rng.uniform(0.0, 5.0), 0.0
    states[0] = v, phi_dot
    gain = rng.uniform(0.2, 1.5)
    raw_left = 0
    raw = (0.0, 0.0)
    for k in range(steps):
        if rng.random() < 0.002:
            gain = rng.uniform(0.2, 1.5)
        if raw_left == 0 and rng.random() < 0.01:
            raw_left = int(rng.integers(5, 60))
            raw = (rng.uniform(0, 1), rng.uniform(0, 1) * (rng.random() < 0.5))
        if raw_left > 0:
            pedal, brake = raw
            raw_left -= 1
        else:
            err = speed_target() - v
            effort = gain * err + rng.normal(0.0, 0.05)
            pedal = min(max(effort, 0.0), 1.0)
            brake = min(max(-0.5 * effort, 0.0), 1.0)
        if v > GEM_V_ENVELOPE:
            pedal = 0.0
        cmd = steer()
        controls[k] = pedal, brake, cmd
        v, phi_dot = gem_plant_step((v, phi_dot), (pedal, brake, cmd), params)
        states[k + 1] = v, phi_dot
    return states, controls


def warthog_excitation(
    params: WarthogPlantParams, seconds: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One Warthog recording: states (T+1, 2) of (v, omega) and controls (T, 2)."""
    steps = int(round(seconds / params.dt))
    v_ch = _Channel(rng, 0.0, WARTHOG_V_MAX, params.dt, 0.3)
    w_ch = _Channel(rng, -WARTHOG_OMEGA_MAX, WARTHOG_OMEGA_MAX, params.dt, 0.3)
    states = np.empty((steps + 1, 2))
    controls = np.empty((steps, 2))
    x = (rng.uniform(0.0, 2.0), 0.0)
    states[0] = x
    for k in range(steps):
        u = (v_ch(), w_ch())
        controls[k] = u
        x = warthog_plant_step(x, u, params)
        states[k + 1] = x
    return states, controls


def generate_dataset(
    platform: str,
    seconds: float,
    seed: int = 0,
    gem_params: GemPlantParams | None = None,
    warthog_params: WarthogPlantParams | None = None,
    episode_seconds: float = EPISODE_SECONDS,
) -> TransitionDataset:
    """Drive the plant for ``seconds`` in total, split into independent recordings."""
    rng = np.random.default_rng(seed)
    if platform == "gem":
        params = gem_params or GemPlantParams()
        excite = gem_excitation
    elif platform == "warthog":
        params = warthog_params or WarthogPlantParams()
        excite = warthog_excitation
    else:
        raise ValueError(f"unknown platform {platform!r}")
    total = int(round(seconds / params.dt))
    per_episode = int(round(episode_seconds / params.dt))
    episodes = []
    done = 0
    while done < total:
        steps = min(per_episode, total - done)
        episodes.append(excite(params, steps * params.dt, rng))
        done += steps
    return TransitionDataset.from_trajectories(episodes, platform, params.dt)


def coverage_report(dataset: TransitionDataset, bins: int = 20) -> dict:
    """Per-channel range and histogram of the recorded states and controls."""
    s_names, c_names = dataset.channel_names()
    channels = {}
    for name, col in zip((*s_names, *c_names), np.hstack([dataset.X, dataset.U]).T):
        counts, edges = np.histogram(col, bins=bins)
        channels[name] = {
            "min": float(col.min()),
            "max": float(col.max()),
            "mean": float(col.mean()),
            "std": float(col.std()),
            "counts": counts.tolist(),
            "edges": edges.tolist(),
        }
    return {
        "platform": dataset.platform,
        "dt": dataset.dt,
        "rows": len(dataset),
        "episodes": int(dataset.episode_id.max()) + 1 if len(dataset) else 0,
        "channels": channels,
    }


def format_coverage(report: dict, width: int = 40) -> str:
    """Text histograms, one block per channel."""
    out = [f"{report['platform']}: {report['rows']} rows in {report['episodes']} recordings at dt = {report['dt']:.4f} s"]
    for name, ch in report["channels"].items():
        out.append(f"{name}: min {ch['min']:.3f} max {ch['max']:.3f} mean {ch['mean']:.3f} std {ch['std']:.3f}")
        peak = max(ch["counts"]) or 1
        for c, lo, hi in zip(ch["counts"], ch["edges"][:-1], ch["edges"][1:]):
            out.append(f"  [{lo:9.3f}, {hi:9.3f}) {'#' * int(round(width * c / peak)):<{width}} {c}")
    return "\n".join(out) + "\n"
