"""Command-line entry point wiring datasets, backends, pipeline, metrics,
and simulator into reproducible runs.

Exit codes: 0 success, 2 config validation, 3 dataset error, 4 irrecoverable
backend error. All outputs go under --out; every run directory gets a
manifest recording the resolved config, its hash, the seed, and timestamps.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import click

from . import __version__, dataset, evaluation, pipeline, simulator
from .backend import (
    BackendError,
    DEFAULT_RETRY_ATTEMPTS,
    HTTPBackend,
    MockBackend,
)
from .dataset import DatasetError
from .pipeline import ConfigError, Engine, PipelineConfig

EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_BACKEND = 4

CONFIG_KEYS = {
    "dataset",
    "recomposer_url",
    "decomposer_url",
    "mock_script",
    "mode",
    "tau",
    "tau_percentile",
    "seed",
    "concurrency",
    "retry_budget",
    "out",
    "scoring",
    "decomposer_prompt_style",
}

DEFAULT_PERCENTILES = [float(p) for p in range(0, 101, 5)]


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(config_path, overrides: dict) -> dict:
    cfg = {}
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            _fail(EXIT_CONFIG, f"cannot read config file: {exc}")
        unknown = set(cfg) - CONFIG_KEYS
        if unknown:
            _fail(EXIT_CONFIG, f"unknown config keys: {sorted(unknown)}")
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    cfg.setdefault("seed", 0)
    cfg.setdefault("concurrency", 1)
    cfg.setdefault("scoring", "exact")
    return cfg


def _retry_budget(cfg: dict) -> int:
    env = os.environ.get("SECONDGUESS_RETRY_BUDGET")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            _fail(EXIT_CONFIG, "SECONDGUESS_RETRY_BUDGET must be an integer")
    return int(cfg.get("retry_budget", DEFAULT_RETRY_ATTEMPTS))


def _build_engine(cfg: dict) -> Engine:
    attempts = _retry_budget(cfg)
    style = cfg.get("decomposer_prompt_style", "decompose_default")
    if cfg.get("mock_script"):
        mock = MockBackend.from_script(cfg["mock_script"])
        return Engine(recomposer=mock, decomposer=mock, decomposer_prompt_style=style)
    if not cfg.get("recomposer_url"):
        _fail(EXIT_CONFIG, "one of mock_script / recomposer_url is required")
    recomposer = HTTPBackend(cfg["recomposer_url"], attempts=attempts)
    decomposer = None
    if cfg.get("decomposer_url"):
        decomposer = HTTPBackend(cfg["decomposer_url"], attempts=attempts)
    return Engine(
        recomposer=recomposer,
        decomposer=decomposer or recomposer,
        decomposer_prompt_style=style,
    )


def _pipeline_config(cfg: dict) -> PipelineConfig:
    try:
        return PipelineConfig(
            mode=cfg.get("mode", "direct"),
            tau=cfg.get("tau"),
            tau_percentile=cfg.get("tau_percentile"),
            seed=int(cfg["seed"]),
            concurrency=int(cfg["concurrency"]),
            scoring=cfg["scoring"],
        )
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _load_questions(cfg: dict):
    if not cfg.get("dataset"):
        _fail(EXIT_CONFIG, "dataset path is required")
    try:
        return dataset.load_dataset(cfg["dataset"])
    except (OSError, DatasetError) as exc:
        _fail(EXIT_DATASET, str(exc))


def _write_manifest(out_dir: Path, cfg: dict, started: str, extra: dict) -> None:
    canonical = json.dumps(cfg, sort_keys=True)
    manifest = {
        "tool_version": __version__,
        "config": cfg,
        "config_hash": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
        "seed": cfg.get("seed", 0),
        "started_at": started,
        "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    manifest.update(extra)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _shared_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True))(fn)
    fn = click.option("--out", type=click.Path(), default="out")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--concurrency", type=int, default=None)(fn)
    fn = click.option("--dataset", "dataset_path", type=click.Path(), default=None)(fn)
    fn = click.option("--recomposer-url", default=None)(fn)
    fn = click.option("--decomposer-url", default=None)(fn)
    fn = click.option("--mock-script", type=click.Path(), default=None)(fn)
    fn = click.option("--tau", type=float, default=None)(fn)
    fn = click.option("--tau-percentile", type=float, default=None)(fn)
    fn = click.option(
        "--scoring", type=click.Choice(["exact", "vqa_consensus"]), default=None
    )(fn)
    return fn


def _gather(kwargs) -> tuple:
    overrides = {
        "out": kwargs["out"],
        "seed": kwargs["seed"],
        "concurrency": kwargs["concurrency"],
        "dataset": kwargs["dataset_path"],
        "recomposer_url": kwargs["recomposer_url"],
        "decomposer_url": kwargs["decomposer_url"],
        "mock_script": kwargs["mock_script"],
        "tau": kwargs["tau"],
        "tau_percentile": kwargs["tau_percentile"],
        "scoring": kwargs["scoring"],
    }
    return kwargs["config_path"], overrides


@click.group()
@click.version_option(version=__version__)
def main() -> None:
    """Selective question decomposition runner and evaluation harness."""


def _execute_run(cfg: dict) -> int:
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    questions, _ = _load_questions(cfg)
    pcfg = _pipeline_config(cfg)
    engine = _build_engine(cfg)
    out_dir = Path(cfg.get("out", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    episodes_path = out_dir / "episodes.jsonl"
    try:
        summary = pipeline.run_batch(questions, pcfg, engine, episodes_path)
    except BackendError as exc:
        _fail(EXIT_BACKEND, str(exc))
    episodes = pipeline.read_episode_log(episodes_path)
    qtype_map = {q.id: q.qtype for q in questions}
    report = evaluation.compute_report(episodes, tau=summary.tau, qtype_map=qtype_map)
    _write_json(out_dir / "metrics.json", report.to_obj())
    _write_manifest(
        out_dir,
        cfg,
        started,
        {
            "episodes": summary.episodes,
            "new_episodes": summary.new_episodes,
            "failures": summary.failures,
            "backend_calls": summary.backend_calls,
            "skipped_missing_oracle": summary.skipped_missing_oracle,
            "resolved_tau": summary.tau,
        },
    )
    click.echo(
        f"run complete: {summary.episodes} episodes "
        f"({summary.failures} failures) -> {episodes_path}"
    )
    return 0 if summary.failures == 0 else 1


@main.command("run")
@_shared_options
@click.option(
    "--mode",
    type=click.Choice(list(pipeline.MODES)),
    default=None,
)
def cmd_run(**kwargs) -> None:
    """Execute a pipeline run and write episodes, metrics, and a manifest."""
    config_path, overrides = _gather(kwargs)
    overrides["mode"] = kwargs["mode"]
    cfg = _load_config(config_path, overrides)
    sys.exit(_execute_run(cfg))


@main.command("sweep")
@_shared_options
@click.option("--log", "log_path", type=click.Path(), default=None)
@click.option("--percentiles", default=None, help="comma-separated percentiles")
def cmd_sweep(log_path, percentiles, **kwargs) -> None:
    """Offline threshold sweep over a decompose-all episode log.

    If --log is not given, a decompose-all run is executed first using the
    provided config; the sweep itself issues no model calls.
    """
    config_path, overrides = _gather(kwargs)
    cfg = _load_config(config_path, overrides)
    out_dir = Path(cfg.get("out", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    if log_path is None:
        cfg["mode"] = "decompose_all"
        cfg.pop("tau", None)
        cfg.pop("tau_percentile", None)
        _execute_run(cfg)
        log_path = out_dir / "episodes.jsonl"
    if not Path(log_path).exists():
        _fail(EXIT_DATASET, f"episode log not found: {log_path}")
    grid = DEFAULT_PERCENTILES
    if percentiles:
        try:
            grid = [float(p) for p in percentiles.split(",")]
        except ValueError:
            _fail(EXIT_CONFIG, "percentiles must be comma-separated numbers")
    episodes = pipeline.read_episode_log(log_path)
    try:
        points = evaluation.sweep(episodes, grid)
    except ValueError as exc:
        _fail(EXIT_DATASET, str(exc))
    csv_path = out_dir / "sweep.csv"
    evaluation.write_sweep_csv(points, csv_path)
    click.echo(f"wrote {len(points)} sweep points -> {csv_path}")


@main.command("oracle")
@_shared_options
@click.option(
    "--condition",
    type=click.Choice(["oracle", "self_answer", "no_answer", "scrambled"]),
    required=True,
)
def cmd_oracle(condition, **kwargs) -> None:
    """Run one oracle-consumption condition and emit a per-qtype report."""
    config_path, overrides = _gather(kwargs)
    cfg = _load_config(config_path, overrides)
    cfg["mode"] = f"oracle_{condition}"
    questions, _ = _load_questions(cfg)
    if not any(q.oracle_sub_qas for q in questions):
        _fail(EXIT_DATASET, "dataset carries no sub_qas; oracle modes need them")
    code = _execute_run(cfg)
    out_dir = Path(cfg.get("out", "out"))
    with open(out_dir / "metrics.json", "r", encoding="utf-8") as fh:
        report = json.load(fh)
    report["condition"] = condition
    report["answers_present"] = condition != "no_answer"
    _write_json(out_dir / "metrics.json", report)
    sys.exit(code)


@main.command("convert")
@click.option("--input", "input_path", type=click.Path(exists=True), required=True)
@click.option("--output", "output_path", type=click.Path(), required=True)
def cmd_convert(input_path, output_path) -> None:
    """Convert winoground-style records into the canonical VQA schema."""
    records = []
    try:
        with open(input_path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        questions, warnings = dataset.convert_winoground(records)
    except (json.JSONDecodeError, DatasetError) as exc:
        _fail(EXIT_DATASET, str(exc))
    dataset.save_dataset(questions, output_path)
    click.echo(
        f"converted {len(records)} records into {len(questions)} questions "
        f"({warnings} caption warnings) -> {output_path}"
    )


@main.command("stats")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), required=True)
def cmd_stats(dataset_path) -> None:
    """Print item count and average question length for a dataset."""
    try:
        questions, manifest = dataset.load_dataset(dataset_path)
    except DatasetError as exc:
        _fail(EXIT_DATASET, str(exc))
    computed = dataset.stats(questions, name=manifest.name)
    images = len({q.image for q in questions})
    click.echo(
        json.dumps(
            {
                "name": computed.name,
                "items": computed.items,
                "images": images,
                "avg_question_length": computed.avg_question_length,
            },
            indent=2,
        )
    )


@main.command("simulate")
@click.option("--acc", type=float, required=True)
@click.option("--ecr", type=float, required=True)
@click.option("--eic", type=float, required=True)
@click.option("--trials", type=int, default=100_000)
@click.option("--seed", type=int, default=0)
@click.option("--tau-grid", default=None, help="comma-separated thresholds")
@click.option("--out", type=click.Path(), default="out")
def cmd_simulate(acc, ecr, eic, trials, seed, tau_grid, out) -> None:
    """Simulate the accuracy-vs-threshold curve and write the sweep CSV."""
    taus = [i / 20 for i in range(21)]
    if tau_grid:
        try:
            taus = [float(t) for t in tau_grid.split(",")]
        except ValueError:
            _fail(EXIT_CONFIG, "tau-grid must be comma-separated numbers")
    try:
        cfg = simulator.SimConfig(
            base_accuracy=acc, e_cr=ecr, e_ic=eic, trials=trials, seed=seed
        )
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    curve = simulator.simulate(cfg, taus)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = [
        evaluation.SweepPoint(
            percentile=p.eta * 100.0,
            tau=p.tau,
            surprisal=evaluation.surprisal(p.tau) if p.tau > 0 else float("inf"),
            eta=p.eta,
            accuracy=p.accuracy,
        )
        for p in curve.points
    ]
    csv_path = out_dir / "simulated_sweep.csv"
    evaluation.write_sweep_csv(points, csv_path)
    click.echo(
        f"decompose-all accuracy {curve.decompose_all_accuracy:.4f}, "
        f"optimal tau {curve.optimal_tau} "
        f"(accuracy {curve.optimal_accuracy:.4f}) -> {csv_path}"
    )


@main.command("metrics")
@click.option("--log", "log_path", type=click.Path(exists=True), required=True)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True), default=None)
@click.option("--tau", type=float, default=None)
@click.option("--out", type=click.Path(), default="out")
def cmd_metrics(log_path, dataset_path, tau, out) -> None:
    """Recompute the metrics report (and sweep CSV) from an episode log."""
    episodes = pipeline.read_episode_log(log_path)
    qtype_map = None
    if dataset_path:
        questions, _ = dataset.load_dataset(dataset_path)
        qtype_map = {q.id: q.qtype for q in questions}
    try:
        report = evaluation.compute_report(episodes, tau=tau, qtype_map=qtype_map)
    except ValueError as exc:
        _fail(EXIT_DATASET, str(exc))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "metrics.json", report.to_obj())
    points = evaluation.sweep(episodes, DEFAULT_PERCENTILES)
    evaluation.write_sweep_csv(points, out_dir / "sweep.csv")
    click.echo(f"wrote metrics.json and sweep.csv -> {out_dir}")


if __name__ == "__main__":
    main()
