"""Command-line entry point: ``nnilqr {gen-data,train,run,table,verify}``.

Exit codes: 0 success, 1 verification or metric-ceiling failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, bundled_scenario_dir, load_scenario, scenario_files
from .datagen import coverage_report, format_coverage, generate_dataset
from .neural import TrainHyperparams, TrainingError, TransitionDataset, save_report, train_dynamics
from .runner import ScenarioJob, resolve_model, run_scenario, write_episode
from .sim import batch_evaluate

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

log = logging.getLogger("nnilqr")


class UsageError(Exception):
    pass


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Registered on the main parser and on every subcommand so the flags work in either position.
    default = argparse.SUPPRESS if suppress else None
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=default, help="root seed (overrides scenario seeds)")
    g.add_argument("--out", default=default, help="output directory (default: the scenario's output, else ./out)")
    g.add_argument(
        "--trace",
        action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="write per-iteration solver traces (JSON lines)",
    )
    g.add_argument("--filter", default=default, help="comma-separated suite or scenario names to select")
    g.add_argument(
        "-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0, help="more logging"
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnilqr", description="Learned-dynamics ILQR path tracking.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    g = sub.add_parser("gen-data", help="generate a training dataset by exciting a plant")
    _global_flags(g, suppress=True)
    g.add_argument("--platform", choices=("gem", "warthog"), default="gem")
    g.add_argument("--seconds", type=float, default=3600.0, help="simulated driving time (default 3600)")
    g.add_argument("--bins", type=int, default=20, help="histogram bins in the coverage report")
    g.add_argument("--output", help="dataset CSV path (default: <out>/<platform>.data.csv)")

    t = sub.add_parser("train", help="fit the dynamics MLP on a dataset CSV")
    _global_flags(t, suppress=True)
    t.add_argument("dataset", help="dataset CSV from gen-data")
    t.add_argument("--epochs", type=int, default=TrainHyperparams.max_epochs)
    t.add_argument("--batch-size", type=int, default=TrainHyperparams.batch_size)
    t.add_argument("--lr", type=float, default=TrainHyperparams.learning_rate)
    t.add_argument("--optimizer", choices=("adam", "momentum"), default=TrainHyperparams.optimizer)
    t.add_argument("--schedule", choices=("cosine", "plateau"), default=TrainHyperparams.schedule)
    t.add_argument("--patience", type=int, default=TrainHyperparams.patience)
    t.add_argument(
        "--max-rel-rms",
        type=float,
        default=0.01,
        help="fail (exit 1) if any channel's held-out RMS error exceeds this fraction of its std (default 0.01)",
    )
    t.add_argument("--max-val-mse", type=float, help="fail (exit 1) if the held-out MSE exceeds this value")
    t.add_argument("--output", help="model path (default: <out>/<platform>.model.json)")

    r = sub.add_parser("run", help="run one scenario and write its log and metrics")
    _global_flags(r, suppress=True)
    r.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    r.add_argument("--duration", type=float, help="override the scenario duration [s]")

    tb = sub.add_parser("table", help="run every scenario in a directory and print an error table")
    _global_flags(tb, suppress=True)
    tb.add_argument("directory", nargs="?", help="scenario directory (default: bundled scenarios)")
    tb.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    tb.add_argument("--after-transient", action="store_true", help="exclude each scenario's start transient")

    v = sub.add_parser("verify", help="run the oracle suites")
    _global_flags(v, suppress=True)
    v.add_argument("--model", help="model file checked by the gradient suite (default: bundled GEM model)")
    return p


def _names(filter_arg) -> list[str] | None:
    if not filter_arg:
        return None
    return [n.strip() for n in filter_arg.split(",") if n.strip()]


def _scenario_path(arg: str) -> Path:
    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_scenario_dir() / (arg if arg.endswith(".scenario") else f"{arg}.scenario")
    if bundled.exists():
        return bundled
    raise ConfigError(f"scenario file not found: {arg}")


def _out_dir(args, fallback: str | None = None) -> Path:
    out = Path(args.out or fallback or "out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.seconds <= 0:
        raise UsageError("--seconds must be positive")
    data = generate_dataset(args.platform, args.seconds, seed=seed)
    path = Path(args.output) if args.output else _out_dir(args) / f"{args.platform}.data.csv"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        data.to_csv(path)
        report = coverage_report(data, bins=args.bins)
        stem = path.with_name(path.name.removesuffix(".csv"))
        Path(f"{stem}.coverage.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
        Path(f"{stem}.coverage.txt").write_text(format_coverage(report), encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {path}: {exc}") from None
    print(f"wrote {len(data)} rows to {path}")
    print(f"coverage report: {stem}.coverage.json, {stem}.coverage.txt")
    return EXIT_OK


def cmd_train(args) -> int:
    seed = 0 if args.seed is None else args.seed
    try:
        data = TransitionDataset.from_csv(args.dataset)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {args.dataset}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    hyper = TrainHyperparams(
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        schedule=args.schedule,
        patience=args.patience,
    )
    try:
        model, report = train_dynamics(data, hyper, seed=seed)
    except TrainingError as exc:
        raise UsageError(f"{args.dataset}: {exc}") from None
    name = data.platform or "model"
    path = Path(args.output) if args.output else _out_dir(args) / f"{name}.model.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    report_path = path.with_name(path.name.removesuffix(".json").removesuffix(".model") + ".train.json")
    save_report(report, report_path)
    print(f"epochs {report.epochs}  train MSE {report.train_mse:.4e}  held-out MSE {report.val_mse:.4e}")
    print("held-out RMS / std per channel: " + ", ".join(f"{r:.4%}" for r in report.val_rel_rms))
    print(f"wrote {path} and {report_path}")
    failed = []
    if args.max_rel_rms is not None and max(report.val_rel_rms) > args.max_rel_rms:
        failed.append(f"held-out RMS/std {max(report.val_rel_rms):.4%} exceeds ceiling {args.max_rel_rms:.4%}")
    if args.max_val_mse is not None and report.val_mse > args.max_val_mse:
        failed.append(f"held-out MSE {report.val_mse:.4e} exceeds ceiling {args.max_val_mse:.4e}")
    for msg in failed:
        print(f"error: {msg}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_run(args) -> int:
    cfg = load_scenario(_scenario_path(args.scenario))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.duration is not None:
        if args.duration <= 0:
            raise UsageError("--duration must be positive")
        cfg = replace(cfg, duration=args.duration)
    model = resolve_model(cfg)
    out = _out_dir(args, cfg.output)
    trace_fh = None
    if args.trace:
        trace_path = out / f"{cfg.name}.trace.jsonl"
        trace_fh = open(trace_path, "w", encoding="utf-8")
    try:
        result = run_scenario(cfg, trace=trace_fh, model=model)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    paths = write_episode(result, cfg, out)
    m = result.metrics
    print(f"{cfg.name}: {result.steps} steps, " + ("completed" if result.completed else "time limit reached"))
    print(f"ACE {m.ace:.3f} m  MCE {m.mce:.3f} m  AVE {m.ave:.3f} m/s  MVE {m.mve:.3f} m/s")
    if result.solver_warnings:
        print(f"solver warnings: {result.solver_warnings}")
    print("wrote " + ", ".join(str(p) for p in paths.values()) + (f", {trace_path}" if args.trace else ""))
    if result.aborted:
        print(f"error: episode aborted: {result.reason}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_table(args) -> int:
    directory = Path(args.directory) if args.directory else bundled_scenario_dir()
    files = scenario_files(directory)
    wanted = _names(args.filter)
    if wanted:
        files = [f for f in files if any(w in f.name for w in wanted)]
    if not files:
        raise UsageError(f"no scenario files selected in {directory}")
    for f in files:
        load_scenario(f)  # surface config errors before any episode runs
    jobs = [
        (load_scenario(f).name, ScenarioJob(str(f), args.seed, args.after_transient)) for f in files
    ]
    table = batch_evaluate(jobs, parallelism=args.jobs)
    out = _out_dir(args)
    (out / "table.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "table.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text(), end="")
    print(f"wrote {out / 'table.csv'}")
    return EXIT_FAIL if any(r.metrics is None for r in table.rows) else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_results, run_suites

    names = _names(args.filter)
    try:
        results = run_suites(names, seed=0 if args.seed is None else args.seed, model_path=args.model)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "run": cmd_run,
    "table": cmd_table,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
