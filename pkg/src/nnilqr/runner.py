"""Turn parsed scenarios into episodes: model resolution, output files, batch jobs."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, TextIO

from .config import BUNDLED_PREFIX, ConfigError, ScenarioConfig, bundled_model_path, load_scenario
from .datagen import generate_dataset
from .neural import MlpModel, TrainHyperparams, load_model, train_dynamics
from .sim import EpisodeResult, Metrics, run_episode

log = logging.getLogger(__name__)

_trained_cache: dict[tuple, MlpModel] = {}


def resolve_model(cfg: ScenarioConfig) -> MlpModel:
    """Load the scenario's model file, or train one on freshly generated data."""
    src = cfg.model
    if src.path is not None:
        path = src.path
        if path.startswith(BUNDLED_PREFIX):
            path = str(bundled_model_path(path[len(BUNDLED_PREFIX) :]))
        if not Path(path).exists():
            raise ConfigError(f"model file not found: {path}", cfg.source, None, "path")
        try:
            return load_model(path)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot load model {path}: {exc}", cfg.source, None, "path") from None
    key = (cfg.platform, src.train_seconds, src.epochs, cfg.seed)
    if key not in _trained_cache:
        log.info("training %s model on %.0f s of generated data", cfg.platform, src.train_seconds)
        data = generate_dataset(cfg.platform, src.train_seconds, seed=cfg.seed)
        hyper = TrainHyperparams() if src.epochs is None else TrainHyperparams(max_epochs=src.epochs)
        _trained_cache[key] = train_dynamics(data, hyper, seed=cfg.seed)[0]
    return _trained_cache[key]


def run_scenario(
    cfg: ScenarioConfig,
    trace: Optional[TextIO] = None,
    keep_cost_histories: bool = False,
    model: Optional[MlpModel] = None,
) -> EpisodeResult:
    model = model if model is not None else resolve_model(cfg)
    return run_episode(
        cfg.track,
        cfg.plant_params,
        model,
        controller_config=cfg.controller,
        noise=cfg.noise,
        duration=cfg.duration,
        platform=cfg.platform,
        weights=cfg.weights,
        trace=trace,
        keep_cost_histories=keep_cost_histories,
    )


def write_episode(result: EpisodeResult, cfg: ScenarioConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write ``<name>.log.csv``, ``<name>.metrics.json`` and ``<name>.summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "log": out / f"{cfg.name}.log.csv",
        "metrics": out / f"{cfg.name}.metrics.json",
        "summary": out / f"{cfg.name}.summary.json",
    }
    result.write_csv(paths["log"])
    paths["metrics"].write_text(json.dumps(result.metrics.to_dict(), indent=2) + "\n", encoding="utf-8")
    after = result.metrics_after(cfg.transient) if result.log["t"][-1] >= cfg.transient else None
    summary = {
        "scenario": cfg.name,
        "platform": cfg.platform,
        "seed": cfg.seed,
        "steps": result.steps,
        "completed": result.completed,
        "aborted": result.aborted,
        "reason": result.reason,
        "solver_warnings": result.solver_warnings,
        "metrics": result.metrics.to_dict(),
        "transient": cfg.transient,
        "metrics_after_transient": None if after is None else after.to_dict(),
    }
    paths["summary"].write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return paths


@dataclass(frozen=True)
class ScenarioJob:
    """Picklable batch entry: run the scenario at ``path`` (optionally reseeded) and return its metrics."""

    path: str
    seed: Optional[int] = None
    after_transient: bool = False

    def __call__(self) -> Metrics:
        cfg = load_scenario(self.path)
        if self.seed is not None:
            cfg = cfg.with_seed(self.seed)
        result = run_scenario(cfg)
        if result.aborted:
            raise RuntimeError(result.reason)
        return result.metrics_after(cfg.transient) if self.after_transient else result.metrics

