"""
SensorLens CLI - anomaly detection experiments on wireless sensor data.

Usage:
    python -m app.cli [COMMAND] [OPTIONS]

Commands:
    synth      Write synthetic sensor streams in IBRL text layout
    encode     Render normal/faulted windows as 16x16 PGM images
    train      Train one model on one fault corpus and save it
    eval       Score a saved model on its (or another) fault corpus
    reproduce  Run the single-fault grids and the mixed-fault suite
    sweep      Log a learning rate x batch size x momentum sweep
"""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional

import typer

from app.core.config import settings
from app.core.observability import EventType, record_event
from app.core.run_config import CART_MODEL, MODEL_CHOICES, ConfigLoadError, RunConfig, load_run_config
from app.services.cart_baseline import CartError
from app.services.cnn_layers import LayerShapeError, NumericError
from app.services.cnn_model import ModelFormatError
from app.services.cnn_trainer import TrainingError
from app.services.experiment_runner import (
    ExperimentError,
    SweepGrid,
    evaluate_saved,
    load_windows,
    run_hyperparameter_sweep,
    run_reproduction,
    synth_seed,
    train_and_save,
)
from app.services.fault_injector import FaultInjectionError, apply_fault
from app.services.fault_spec import FaultKind, FaultSpec
from app.services.gray_encoder import EncodingError, encode_window, export_pgm, export_png, fit_stats
from app.services.metrics import Confusion, MetricError, da, pre, tpr
from app.services.run_storage import RunStorage, StorageError
from app.services.sensor_ingest import IngestError, synth_stream, write_ibrl
from app.services.sweep_log import SweepLog

app = typer.Typer(
    name="sensorlens",
    help="SensorLens - CNN anomaly detection for wireless sensor network data"
)

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s"
)

# Most specific first: LayerShapeError is also a ValueError
_ERROR_MODULES = (
    (ConfigLoadError, "cli"),
    (IngestError, "ingest"),
    (FaultInjectionError, "faults"),
    (EncodingError, "encode"),
    (LayerShapeError, "nn"),
    (NumericError, "nn"),
    (TrainingError, "nn"),
    (ModelFormatError, "nn"),
    (CartError, "baseline"),
    (MetricError, "eval"),
    (ExperimentError, "eval"),
    (StorageError, "eval"),
    (OSError, "cli"),
    (ValueError, "cli"),
)


@contextmanager
def _diagnostics(run_dir: Optional[Path] = None) -> Iterator[None]:
    """Turn pipeline errors into a one-line diagnostic and exit status 1."""
    try:
        yield
    except tuple(cls for cls, _ in _ERROR_MODULES) as e:
        module = next(name for cls, name in _ERROR_MODULES if isinstance(e, cls))
        if run_dir is not None:
            record_event(run_dir, EventType.RUN_FAILED, {"module": module, "error": str(e)})
        typer.echo(f"❌ [{module}] {e}", err=True)
        raise typer.Exit(1)


def _parse_list(text: Optional[str], cast=float) -> Optional[List]:
    if text is None:
        return None
    try:
        return [cast(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigLoadError(f"Cannot parse list {text!r}")


def _load_config(
    config: Optional[str],
    dataset: Optional[str] = None,
    synthetic: Optional[bool] = None,
    nodes: Optional[str] = None,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    jobs: Optional[int] = None,
    seeds: Optional[int] = None,
    max_windows: Optional[int] = None,
    epochs: Optional[int] = None,
) -> RunConfig:
    overrides = {
        "dataset_path": dataset,
        "synthetic": synthetic,
        "nodes": _parse_list(nodes, int),
        "master_seed": seed,
        "output_dir": output_dir,
        "jobs": jobs,
        "seed_count": seeds,
        "max_windows": max_windows,
        "train.max_epochs": epochs,
    }
    if config is not None:
        return load_run_config(config).with_overrides(**overrides)

    base = {"master_seed": 0 if seed is None else seed}
    if dataset is None and not synthetic:
        raise ConfigLoadError("Give --config, --dataset or --synthetic")
    return RunConfig(**base, synthetic=bool(synthetic), dataset_path=dataset).with_overrides(**overrides)


def _parse_fault(fault: str, intensity: Optional[float], config: RunConfig) -> FaultSpec:
    """``noise`` / ``short`` / ``fixed`` with an intensity, or ``a+b`` mixed."""
    parts = fault.split("+")
    try:
        kinds = [FaultKind(p.strip()) for p in parts]
    except ValueError:
        raise ConfigLoadError(f"Unknown fault {fault!r}; use noise, short, fixed or a+b")

    if len(kinds) == 1:
        kind = kinds[0]
        if kind == FaultKind.MIXED:
            raise ConfigLoadError("Name the two components of a mixed fault, e.g. noise+fixed")
        value = intensity if intensity is not None else config.train_intensity(kind)
        return FaultSpec.single(kind, value, config.fault_w)
    if len(kinds) == 2:
        mixed_values = {FaultKind.NOISE: config.mixed_r, FaultKind.SHORT: config.mixed_f, FaultKind.FIXED: config.mixed_G}
        a, b = (FaultSpec.single(k, mixed_values[k], config.fault_w) for k in kinds)
        return FaultSpec.mixed(a, b, config.fault_w)
    raise ConfigLoadError("Mixed faults combine exactly two kinds")


def _echo_metrics(c: Confusion, strict: bool = False) -> None:
    typer.echo(f"   tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}")
    for name, fn in (("DA", da), ("TPR", tpr), ("PRE", pre)):
        try:
            typer.echo(f"   {name}: {100 * fn(c):.2f}%")
        except MetricError:
            if strict:
                raise
            typer.echo(f"   {name}: undefined")


@app.callback()
def main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging with pipeline traces")
):
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@app.command()
def synth(
    output: Optional[str] = typer.Option(None, "--output", "-o", help="Target file (default <output_dir>/synthetic/data.txt)"),
    nodes: str = typer.Option("1,2", "--nodes", help="Comma-separated node ids"),
    samples: int = typer.Option(6400, "--samples", "-n", help="Samples per node"),
    seed: int = typer.Option(0, "--seed", help="Master seed"),
):
    """
    Generate synthetic sensor streams in IBRL text layout.

    Synthetic data is for tests and smoke runs only; reports built from it
    are watermarked as such.
    """
    with _diagnostics():
        node_ids = _parse_list(nodes, int)
        path = Path(output) if output else settings.get_output_path() / "synthetic" / "data.txt"
        streams = [synth_stream(node, samples, synth_seed(seed, node)) for node in node_ids]
        write_ibrl(streams, path)

    typer.echo(f"✅ Synthetic IBRL file: {path}")
    typer.echo(f"   Nodes: {node_ids}  Samples/node: {samples}  Seed: {seed}")


ENCODE_CATEGORIES = ("normal", "noise", "short", "fixed", "noise+fixed", "noise+short", "short+fixed")


@app.command()
def encode(
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config name or path"),
    dataset: Optional[str] = typer.Option(None, "--dataset", "-d", help="IBRL data.txt"),
    synthetic: Optional[bool] = typer.Option(None, "--synthetic/--ibrl", help="Use synthetic streams"),
    node: Optional[int] = typer.Option(None, "--node", help="Node to take the window from (default: first configured)"),
    index: int = typer.Option(0, "--index", "-i", help="Window index within the node"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed"),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="Image directory (default <output_dir>/images)"),
    png: bool = typer.Option(False, "--png", help="Also write enlarged PNG previews"),
):
    """
    Render one window as the seven image categories: normal, noise, short,
    fixed, noise+fixed, noise+short and short+fixed.
    """
    with _diagnostics():
        cfg = _load_config(config, dataset, synthetic, str(node) if node else None, seed)
        node_id = node or cfg.nodes[0]
        data = load_windows(cfg)
        candidates = [w for w in data.windows if w.node_id == node_id]
        if index >= len(candidates):
            raise ExperimentError(f"Node {node_id} has {len(candidates)} windows; index {index} is out of range")
        window = candidates[index]

        rendered = {"normal": window}
        for category in ENCODE_CATEGORIES[1:]:
            if "+" in category:
                spec = _parse_fault(category, None, cfg)
            else:
                kind = FaultKind(category)
                spec = _parse_fault(category, {FaultKind.NOISE: cfg.mixed_r, FaultKind.SHORT: cfg.mixed_f,
                                               FaultKind.FIXED: cfg.mixed_G}[kind], cfg)
            rendered[category] = apply_fault(window, spec, seed=cfg.master_seed)

        # one scale for all seven so brightness is comparable across images
        stats = fit_stats(list(rendered.values()))
        out_dir = Path(out) if out else cfg.resolved_output_dir() / "images"
        for category, faulted in rendered.items():
            stem = f"{category}_node{node_id}_m{window.start_index}_seed{cfg.master_seed}"
            image = encode_window(faulted, stats)
            path = export_pgm(image, out_dir / f"{stem}.pgm")
            if png:
                export_png(image, out_dir / f"{stem}.png")
            record_event(out_dir, EventType.IMAGE_EXPORTED, {"category": category, "path": str(path)})
            typer.echo(f"🖼️  {category:<12} -> {path}")

    typer.echo(f"✅ {len(rendered)} images in {out_dir}")


@app.command()
def train(
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config name or path"),
    model: str = typer.Option("M2", "--model", "-m", help="M1, M2, M3 or CART"),
    fault: str = typer.Option("fixed", "--fault", "-f", help="noise | short | fixed | a+b"),
    intensity: Optional[float] = typer.Option(None, "--intensity", help="r, f or G (default: middle of the grid)"),
    dataset: Optional[str] = typer.Option(None, "--dataset", "-d", help="IBRL data.txt"),
    synthetic: Optional[bool] = typer.Option(None, "--synthetic/--ibrl", help="Use synthetic streams"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override max epochs"),
    max_windows: Optional[int] = typer.Option(None, "--max-windows", help="Cap the number of windows"),
    out: Optional[str] = typer.Option(None, "--out", "-o", help="Model file (.npz for CNN, .json for CART)"),
):
    """Train one (model, fault) pair, report its test metrics and save it."""
    with _diagnostics():
        cfg = _load_config(config, dataset, synthetic, seed=seed, epochs=epochs, max_windows=max_windows)
        if model not in MODEL_CHOICES:
            raise ConfigLoadError(f"Unknown model {model!r}")
        spec = _parse_fault(fault, intensity, cfg)
        suffix = ".json" if model == CART_MODEL else ".npz"
        path = Path(out) if out else cfg.resolved_output_dir() / "models" / f"{model}_{spec.label}_{spec.intensity_label}{suffix}"

        typer.echo(f"🧠 Training {model} on {spec.label} ({spec.intensity_label})...")
        data = load_windows(cfg)
        outcome = train_and_save(data.windows, spec, model, cfg, path)
        record_event(path.parent, EventType.MODEL_TRAINED, {
            "model": model, "fault": spec.label, "intensity": spec.intensity_label, "path": str(path),
        })

    typer.echo(f"✅ Model saved: {path}")
    typer.echo(f"📊 Test split ({cfg.data_source}):")
    _echo_metrics(outcome.confusion)


@app.command("eval")
def evaluate(
    model_file: str = typer.Argument(..., help="Model written by `train`"),
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config name or path"),
    model: Optional[str] = typer.Option(None, "--model", "-m", help="Expected preset; mismatch is an error"),
    fault: Optional[str] = typer.Option(None, "--fault", "-f", help="Evaluate on another fault"),
    intensity: Optional[float] = typer.Option(None, "--intensity", help="Intensity for --fault"),
    clean: bool = typer.Option(False, "--clean", help="Score the un-faulted test windows (all normal)"),
    dataset: Optional[str] = typer.Option(None, "--dataset", "-d", help="IBRL data.txt"),
    synthetic: Optional[bool] = typer.Option(None, "--synthetic/--ibrl", help="Use synthetic streams"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed"),
    max_windows: Optional[int] = typer.Option(None, "--max-windows", help="Cap the number of windows"),
):
    """
    Evaluate a saved model on the test split it was trained against.

    Every metric must be defined: a corpus without abnormal samples (e.g.
    --clean) exits with status 1.
    """
    path = Path(model_file)
    if not path.exists():
        typer.echo(f"❌ [cli] File not found: {model_file}", err=True)
        raise typer.Exit(1)

    with _diagnostics():
        cfg = _load_config(config, dataset, synthetic, seed=seed, max_windows=max_windows)
        spec = _parse_fault(fault, intensity, cfg) if fault else None
        data = load_windows(cfg)
        name, c = evaluate_saved(data.windows, path, model, spec, clean)
        typer.echo(f"📊 {name} on {'clean ' if clean else ''}test split ({cfg.data_source}):")
        _echo_metrics(c, strict=True)


@app.command()
def reproduce(
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config name or path"),
    run_name: Optional[str] = typer.Option(None, "--run-name", help="Run directory name (default reproduce_seed<N>)"),
    resume: bool = typer.Option(False, "--resume", help="Keep completed cells of an interrupted run"),
    jobs: Optional[int] = typer.Option(None, "--jobs", "-j", help="Worker processes for grid cells"),
    dataset: Optional[str] = typer.Option(None, "--dataset", "-d", help="IBRL data.txt"),
    synthetic: Optional[bool] = typer.Option(None, "--synthetic/--ibrl", help="Use synthetic streams"),
    nodes: Optional[str] = typer.Option(None, "--nodes", help="Comma-separated node ids"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed"),
    seeds: Optional[int] = typer.Option(None, "--seeds", help="Repetitions per cell"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override max epochs"),
    max_windows: Optional[int] = typer.Option(None, "--max-windows", help="Cap the number of windows"),
    output_dir: Optional[str] = typer.Option(None, "--output-dir", help="Base output directory"),
):
    """
    Run the noise, short and fixed single-fault grids and the mixed suite.

    Writes single_noise.csv, single_short.csv, single_fixed.csv, mixed.csv
    and metadata.json; every completed cell is flushed as it finishes.
    """
    with _diagnostics():
        cfg = _load_config(config, dataset, synthetic, nodes, seed, output_dir, jobs, seeds, max_windows, epochs)
        storage = RunStorage.for_run(run_name or f"reproduce_seed{cfg.master_seed}", cfg.resolved_output_dir())

    with _diagnostics(storage.run_dir):
        record_event(storage.run_dir, EventType.RUN_STARTED, {"source": cfg.data_source, "resume": resume})
        data = load_windows(cfg)
        record_event(storage.run_dir, EventType.DATA_LOADED, {
            "windows": len(data.windows), "per_node": data.window_counts,
        })
        typer.echo(f"🔬 {len(data.windows)} windows from {cfg.data_source} data {data.window_counts}")
        if cfg.synthetic:
            typer.echo("⚠️  Synthetic data: these numbers are not an IBRL reproduction")

        reports = run_reproduction(cfg, data, storage, resume)
        record_event(storage.run_dir, EventType.RUN_COMPLETED, {"reports": sorted(reports)})

    for name in storage.list_reports():
        rows = f"{len(reports[name].rows)} rows" if name in reports else "from an earlier run"
        typer.echo(f"✅ {name}.csv ({rows})")
    metadata = storage.read_metadata() or {}
    for check in metadata.get("trend_checks", []):
        mark = {True: "✅", False: "❌", None: "⏭️ "}[check["passed"]]
        typer.echo(f"{mark} {check['name']}: {check['detail']}")
    typer.echo(f"📁 Run directory: {storage.run_dir}")


@app.command()
def sweep(
    config: Optional[str] = typer.Option(None, "--config", "-c", help="Run config name or path"),
    model: str = typer.Option("M2", "--model", "-m", help="CNN preset to tune"),
    fault: str = typer.Option("noise", "--fault", "-f", help="noise | short | fixed | a+b"),
    intensity: Optional[float] = typer.Option(None, "--intensity", help="r, f or G (default: middle of the grid)"),
    lr: Optional[str] = typer.Option(None, "--lr", help="Learning rates, comma-separated"),
    batch: Optional[str] = typer.Option(None, "--batch", help="Batch sizes, comma-separated"),
    momentum: Optional[str] = typer.Option(None, "--momentum", help="Momenta, comma-separated"),
    run_name: Optional[str] = typer.Option(None, "--run-name", help="Run directory name (default sweep_seed<N>)"),
    dataset: Optional[str] = typer.Option(None, "--dataset", "-d", help="IBRL data.txt"),
    synthetic: Optional[bool] = typer.Option(None, "--synthetic/--ibrl", help="Use synthetic streams"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Master seed"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override max epochs"),
    max_windows: Optional[int] = typer.Option(None, "--max-windows", help="Cap the number of windows"),
):
    """Train one preset over a hyperparameter grid and log every trial to sweep.jsonl."""
    with _diagnostics():
        cfg = _load_config(config, dataset, synthetic, seed=seed, epochs=epochs, max_windows=max_windows)
        spec = _parse_fault(fault, intensity, cfg)
        defaults = SweepGrid()
        grid = SweepGrid(
            learning_rates=_parse_list(lr) or defaults.learning_rates,
            batch_sizes=_parse_list(batch, int) or defaults.batch_sizes,
            momenta=_parse_list(momentum) or defaults.momenta,
        )
        storage = RunStorage.for_run(run_name or f"sweep_seed{cfg.master_seed}", cfg.resolved_output_dir())
        log = SweepLog(storage.run_dir)

    with _diagnostics(storage.run_dir):
        typer.echo(f"🔧 Sweeping {model} on {spec.label} ({spec.intensity_label}): {len(grid.trials())} trials")
        data = load_windows(cfg)
        trials = run_hyperparameter_sweep(data.windows, spec, model, cfg, grid, log)
        summary = storage.write_sweep(log.to_frame())

    scored = [t for t in trials if t.DA is not None]
    if scored:
        best = max(scored, key=lambda t: t.DA)
        typer.echo(
            f"🏆 Best: lr={best.learning_rate} batch={best.batch_size} momentum={best.momentum} "
            f"DA={100 * best.DA:.2f}%"
        )
    typer.echo(f"✅ Sweep log: {log.get_log_path()}")
    typer.echo(f"✅ Summary: {summary}")


if __name__ == "__main__":
    app()
