"""Scenario files: TOML sections describing one closed-loop experiment.

See the README for the grammar. Errors carry the offending line and dotted
field name so a bad file can be fixed without reading the source.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .ilqr import SolverConfig
from .plants import GemPlantParams, WarthogPlantParams
from .sim import DEFAULT_TRACKS, NoiseSpec, TrackSpec, perturbed_plant_params
from .tracking import MpcConfig, TrackingWeights, make_platform

BUNDLED_PREFIX = "bundled:"
PLATFORMS = ("gem", "warthog")


class ConfigError(ValueError):
    """Scenario parse or validation failure with optional source location."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None, key: str | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        self.key = key
        loc = ""
        if self.path and line is not None:
            loc = f"{self.path}:{line}: "
        elif self.path:
            loc = f"{self.path}: "
        elif line is not None:
            loc = f"line {line}: "
        what = f"field '{key}': " if key else ""
        super().__init__(f"{loc}{what}{message}")


@dataclass
class ModelSource:
    """Either a model file (or ``bundled:<platform>``) or an inline training request."""

    path: Optional[str] = None
    train_seconds: Optional[float] = None
    epochs: Optional[int] = None


@dataclass
class ScenarioConfig:
    name: str
    platform: str
    track: TrackSpec
    plant_params: Any
    model: ModelSource
    controller: MpcConfig
    weights: TrackingWeights
    noise: NoiseSpec
    duration: float
    seed: int
    perturbation: float = 0.0
    output: Optional[str] = None
    source: Optional[str] = None
    transient: float = 5.0
    plant_overrides: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        """Same scenario with the root seed replaced (noise and perturbation follow it)."""
        base = _base_plant(self.platform, self.plant_overrides)
        return replace(
            self,
            seed=seed,
            noise=replace(self.noise, seed=seed),
            plant_params=perturbed_plant_params(self.platform, self.perturbation, seed, base),
        )


# -- location helpers -------------------------------------------------------------


_SECTION_RE = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY_RE = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _locate(text: str, section: str | None, key: str | None) -> int | None:
    """1-based line of ``key`` inside ``section`` (top level when None)."""
    current = None
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        m = _SECTION_RE.match(stripped)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is None:
            continue
        m = _KEY_RE.match(stripped)
        if m and m.group(1) == key and current == section:
            return no
    return None


class _Reader:
    """Typed access to one TOML table with location-aware errors."""

    def __init__(self, data: dict, section: str | None, text: str, path):
        self.data = data
        self.section = section
        self.text = text
        self.path = path
        self.used: set[str] = set()

    def _err(self, key: str | None, msg: str) -> ConfigError:
        dotted = key if self.section is None else (f"{self.section}.{key}" if key else self.section)
        return ConfigError(msg, self.path, _locate(self.text, self.section, key), dotted)

    def get(self, key: str, kind, default=None, required: bool = False):
        if key not in self.data:
            if required:
                raise self._err(None, f"missing required field '{key}'")
            return default
        self.used.add(key)
        value = self.data[key]
        try:
            return _coerce(value, kind)
        except (TypeError, ValueError) as exc:
            raise self._err(key, str(exc)) from None

    def check_unknown(self, allowed) -> None:
        for key in self.data:
            if key not in allowed and not isinstance(self.data[key], dict):
                raise self._err(key, f"unknown field '{key}'")


def _coerce(value, kind):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"expected a number, got {type(value).__name__} {value!r}")
        v = float(value)
        if not np.isfinite(v):
            raise ValueError(f"expected a finite number, got {value!r}")
        return v
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"expected an integer, got {type(value).__name__} {value!r}")
        return int(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise TypeError(f"expected true or false, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise TypeError(f"expected a string, got {type(value).__name__} {value!r}")
        return value
    if kind == "floats":
        if not isinstance(value, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
        ):
            raise TypeError(f"expected a list of numbers, got {value!r}")
        return tuple(float(x) for x in value)
    raise TypeError(f"unsupported kind {kind!r}")  # pragma: no cover


# -- parsing -----------------------------------------------------------------------


TRACK_FIELDS = {f.name: f.type for f in fields(TrackSpec)}
_TRACK_KINDS = {
    "shape": str,
    "section_speeds": "floats",
    "points": int,
}
TOP_KEYS = ("name", "platform", "duration", "seed", "output", "transient")
SECTIONS = ("track", "plant", "model", "controller", "noise")


def _base_plant(platform: str, overrides: dict):
    base = GemPlantParams() if platform == "gem" else WarthogPlantParams()
    return replace(base, **overrides) if overrides else base


def parse_scenario(text: str, path: str | Path | None = None) -> ScenarioConfig:
    """Parse scenario TOML ``text``; ``path`` anchors relative file references and error messages."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", path, int(m.group(1)) if m else None) from None

    top = _Reader(data, None, text, path)
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in SECTIONS:
                raise ConfigError(f"unknown section [{key}]", path, _locate(text, key, None), key)
        elif key not in TOP_KEYS:
            raise top._err(key, f"unknown field '{key}'")

    platform = top.get("platform", str, required=True)
    if platform not in PLATFORMS:
        raise top._err("platform", f"platform must be one of {PLATFORMS}, got {platform!r}")
    seed = top.get("seed", int, 0)
    duration = top.get("duration", float, 120.0)
    if duration <= 0:
        raise top._err("duration", "duration must be positive")
    transient = top.get("transient", float, 5.0)
    if transient < 0:
        raise top._err("transient", "transient must be nonnegative")
    output = top.get("output", str, None)

    # [track]
    tr = _Reader(data.get("track", {}), "track", text, path)
    shape = tr.get("shape", str, "warthog_combination" if platform == "warthog" else "circle")
    if shape not in DEFAULT_TRACKS:
        raise tr._err("shape", f"unknown track shape {shape!r}; expected one of {tuple(DEFAULT_TRACKS)}")
    track_kw: dict[str, Any] = dict(DEFAULT_TRACKS[shape])
    for key in TRACK_FIELDS:
        if key == "shape" or key not in tr.data:
            continue
        track_kw[key] = tr.get(key, _TRACK_KINDS.get(key, float))
    tr.check_unknown(TRACK_FIELDS)
    try:
        track = TrackSpec(shape=shape, **track_kw)
    except ValueError as exc:
        bad = next((k for k in track_kw if k in str(exc)), None)
        raise tr._err(bad, str(exc)) from None
    v_max = 4.5 if platform == "warthog" else 11.0
    # section speeds replace the cruise speed when given
    targets = track.section_speeds or (track.cruise_speed,)
    if max((track.start_speed, *targets)) > v_max:
        key = "section_speeds" if track.section_speeds else "cruise_speed"
        raise tr._err(key, f"speeds must stay within the {platform} limit of {v_max} m/s")

    # [plant]
    pl = _Reader(data.get("plant", {}), "plant", text, path)
    perturbation = pl.get("perturbation", float, 0.0)
    if not 0.0 <= perturbation < 1.0:
        raise pl._err("perturbation", "perturbation must lie in [0, 1)")
    params_cls = GemPlantParams if platform == "gem" else WarthogPlantParams
    plant_names = [f.name for f in fields(params_cls) if f.name != "dt"]
    overrides = {}
    for key in plant_names:
        if key in pl.data:
            overrides[key] = pl.get(key, float)
    pl.check_unknown(["perturbation", *plant_names])
    try:
        base = _base_plant(platform, overrides)
    except ValueError as exc:
        raise pl._err(next(iter(overrides), None), str(exc)) from None
    plant_params = perturbed_plant_params(platform, perturbation, seed, base)

    # [model]
    md = _Reader(data.get("model", {}), "model", text, path)
    mpath = md.get("path", str, None)
    train_seconds = md.get("train_seconds", float, None)
    epochs = md.get("epochs", int, None)
    md.check_unknown(["path", "train_seconds", "epochs"])
    if mpath is None and train_seconds is None:
        mpath = BUNDLED_PREFIX + platform
    if mpath is not None and train_seconds is not None:
        raise md._err("train_seconds", "give either a model path or a training request, not both")
    if train_seconds is not None and train_seconds <= 0:
        raise md._err("train_seconds", "train_seconds must be positive")
    if mpath is not None and not mpath.startswith(BUNDLED_PREFIX) and path is not None:
        p = Path(mpath)
        if not p.is_absolute():
            mpath = str((Path(path).parent / p).resolve())
    model = ModelSource(mpath, train_seconds, epochs)

    # [controller]
    plat = make_platform(platform)
    ct = _Reader(data.get("controller", {}), "controller", text, path)
    horizon = ct.get("horizon", int, 40)
    replan = ct.get("replan_every", int, 1)
    warm = ct.get("warm_start", bool, True)
    max_it = ct.get("max_iterations", int, 10)
    tol = ct.get("cost_tolerance", float, 1e-3)
    clamp = ct.get("clamp_active", bool, True)
    A = ct.get("weights_A", "floats", tuple(plat.default_weights.A))
    B = ct.get("weights_B", "floats", tuple(plat.default_weights.B))
    ct.check_unknown(
        ["horizon", "replan_every", "warm_start", "max_iterations", "cost_tolerance", "clamp_active", "weights_A", "weights_B"]
    )
    if len(A) != plat.n:
        raise ct._err("weights_A", f"expected {plat.n} entries for {platform}, got {len(A)}")
    if len(B) != plat.m:
        raise ct._err("weights_B", f"expected {plat.m} entries for {platform}, got {len(B)}")
    try:
        weights = TrackingWeights(A=A, B=B, n_copied=plat.default_weights.n_copied)
    except ValueError as exc:
        raise ct._err("weights_A", str(exc)) from None
    if max_it < 1:
        raise ct._err("max_iterations", "max_iterations must be at least 1")
    if tol <= 0:
        raise ct._err("cost_tolerance", "cost_tolerance must be positive")
    try:
        controller = MpcConfig(
            horizon=horizon,
            replan_every=replan,
            warm_start=warm,
            solver=SolverConfig(max_iterations=max_it, cost_tolerance=tol, clamp_active=clamp),
        )
    except ValueError as exc:
        key = "horizon" if "horizon" in str(exc) else "replan_every"
        raise ct._err(key, str(exc)) from None

    # [noise]
    nz = _Reader(data.get("noise", {}), "noise", text, path)
    noise_kw = {}
    for key in ("position_sigma", "heading_sigma", "velocity_sigma", "process_sigma"):
        if key in nz.data:
            noise_kw[key] = nz.get(key, float)
            if noise_kw[key] < 0:
                raise nz._err(key, f"{key} must be nonnegative")
    if "process_noise" in nz.data:
        noise_kw["process_noise"] = nz.get("process_noise", bool)
    nz.check_unknown(["position_sigma", "heading_sigma", "velocity_sigma", "process_sigma", "process_noise"])
    noise = NoiseSpec(seed=seed, **noise_kw)

    name = top.get("name", str, None) or (Path(path).name.split(".")[0] if path else shape)
    cfg = ScenarioConfig(
        name=name,
        platform=platform,
        track=track,
        plant_params=plant_params,
        model=model,
        controller=controller,
        weights=weights,
        noise=noise,
        duration=duration,
        seed=seed,
        perturbation=perturbation,
        output=output,
        source=None if path is None else str(path),
        transient=transient,
        plant_overrides=overrides,
    )
    return cfg


def load_scenario(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {p}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {p}: {exc}") from None
    return parse_scenario(text, p)


SCENARIO_SUFFIX = ".scenario"


def bundled_scenario_dir() -> Path:
    return Path(__file__).parent / "data" / "scenarios"


def bundled_model_path(platform: str) -> Path:
    return Path(__file__).parent / "data" / "models" / f"{platform}.model.json"


def scenario_files(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"scenario directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.name.endswith(SCENARIO_SUFFIX))
