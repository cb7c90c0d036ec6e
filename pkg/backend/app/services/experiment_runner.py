"""
Experiment grids for SensorLens.

A grid is a list of independent cells. Each cell is one (fault spec, seed
repetition) pair: it builds a labelled corpus, fits normalization on the
training split, trains every selected model on that same corpus and scores
them on the held-out test split. Cells are flushed to the run directory as
they complete and reports pool the confusion counts over seeds.
"""

import hashlib
import itertools
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app import __version__
from app.core.observability import EventType, record_event, trace_pipeline
from app.core.run_config import CART_MODEL, RunConfig
from app.core.seeding import RNG_NAME, derive_seed, make_rng
from app.services.cart_baseline import (
    CartModelFile,
    TreeNode,
    cart_features,
    load_cart,
    predict_cart_batch,
    save_cart,
    train_cart,
)
from app.services.cnn_model import (
    ModelConfig,
    ModelParams,
    ModelVersionError,
    load_model,
    param_count,
    predict_batch,
    save_model,
)
from app.services.cnn_trainer import TrainConfig, TrainingError, train
from app.services.fault_injector import LabeledCorpus, build_corpus
from app.services.fault_spec import FaultKind, FaultSpec, mixed_suite_specs
from app.services.gray_encoder import NormStats, encode_windows, fit_stats
from app.services.metrics import Confusion, confusion, da, pre, safe_metric, tpr
from app.services.run_storage import RunStorage
from app.services.sensor_ingest import Window, build_node_stream, load_ibrl, slide_windows, synth_stream
from app.services.sweep_log import SweepLog, SweepTrial

logger = logging.getLogger(__name__)

SINGLE_KINDS = (FaultKind.NOISE, FaultKind.SHORT, FaultKind.FIXED)
MIXED_GRID = "mixed"

Dataset = Tuple[np.ndarray, np.ndarray]


class ExperimentError(Exception):
    """Custom exception for experiment orchestration errors"""
    pass


def grid_name(kind: FaultKind) -> str:
    return f"single_{kind.value}"


def synth_seed(master_seed: int, node_id: int) -> int:
    """Seed of the synthetic stream for one node"""
    return derive_seed(master_seed, "synth", node_id)


# ============================================================================
# Data loading
# ============================================================================

class LoadedData(BaseModel):
    """Windows of the configured nodes plus what a report needs to cite them"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    windows: List[Window]
    window_counts: Dict[int, int]
    source: str
    skipped_rows: int = 0


def _cap_windows(groups: List[List[Window]], max_windows: int) -> List[Window]:
    share = math.ceil(max_windows / len(groups))
    return [w for group in groups for w in group[:share]][:max_windows]


@trace_pipeline
def load_windows(config: RunConfig) -> LoadedData:
    """
    Ingest the configured nodes (IBRL or synthetic) and cut them into windows.

    Raises:
        ConfigLoadError: If the dataset path does not exist
        IngestError: If the dataset cannot be parsed or a node has no rows
        ExperimentError: If no complete window remains
    """
    config.check_paths()
    if config.synthetic:
        streams = [
            synth_stream(node, config.synthetic_samples, synth_seed(config.master_seed, node))
            for node in config.nodes
        ]
        skipped = 0
    else:
        parsed = load_ibrl(Path(config.dataset_path))
        streams = [build_node_stream(parsed.samples, node) for node in config.nodes]
        skipped = parsed.skipped

    groups = [slide_windows(s, config.window_length, config.window_stride) for s in streams]
    if config.max_windows is not None:
        windows = _cap_windows(groups, config.max_windows)
    else:
        windows = [w for group in groups for w in group]
    if not windows:
        raise ExperimentError(f"No complete {config.window_length}-sample window for nodes {config.nodes}")

    per_node = Counter(w.node_id for w in windows)
    counts = {node: per_node.get(node, 0) for node in config.nodes}
    logger.info(f"Loaded {len(windows)} windows from {config.data_source} data: {counts}")
    return LoadedData(windows=windows, window_counts=counts, source=config.data_source, skipped_rows=skipped)


# ============================================================================
# Cell preparation and model evaluation
# ============================================================================

class CellData(BaseModel):
    """Corpus of one cell, split for fitting, early stopping and testing"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: List[Window]
    fit: List[Window]
    valid: List[Window]
    test: List[Window]
    stats: NormStats
    corpus_seed: int
    skipped_degenerate: int = 0


def split_validation(windows: Sequence[Window], fraction: float, seed: int) -> Tuple[List[Window], List[Window]]:
    """Seeded (fit, validation) split of the training windows; both non-empty."""
    if len(windows) < 2:
        raise ExperimentError("Need at least two training windows to hold out validation data")
    order = make_rng(seed).permutation(len(windows))
    n_valid = min(max(int(math.floor(len(windows) * fraction + 0.5)), 1), len(windows) - 1)
    valid = [windows[i] for i in order[:n_valid]]
    fit = [windows[i] for i in order[n_valid:]]
    return fit, valid


def prepare_cell_data(
    windows: Sequence[Window],
    spec: FaultSpec,
    config: RunConfig,
    corpus_seed: int,
    train_spec: Optional[FaultSpec] = None,
) -> CellData:
    """
    Build the corpus of one cell.

    With ``train_spec`` the training split carries that fault while the test
    split carries ``spec``; both corpora use ``corpus_seed`` so the same
    windows land on the same side of the split.
    """
    train_corpus = build_corpus(
        windows, train_spec or spec, config.abnormal_fraction, config.split,
        corpus_seed, config.noise_reference,
    )
    test_corpus = train_corpus
    if train_spec is not None:
        test_corpus = build_corpus(
            windows, spec, config.abnormal_fraction, config.split,
            corpus_seed, config.noise_reference,
        )

    fit, valid = split_validation(train_corpus.train, config.validation_fraction, derive_seed(corpus_seed, "valid"))
    return CellData(
        train=train_corpus.train,
        fit=fit,
        valid=valid,
        test=test_corpus.test,
        stats=fit_stats(train_corpus.train),
        corpus_seed=corpus_seed,
        skipped_degenerate=max(train_corpus.skipped_degenerate, test_corpus.skipped_degenerate),
    )


class ModelOutcome(BaseModel):
    """Test-split result of one model in one cell"""
    model: str
    confusion: Confusion
    epochs_run: int = 0
    best_epoch: int = 0
    valid_da: Optional[float] = None
    tree_depth: Optional[int] = None


class _EncodedCell:
    """CNN inputs of a cell, encoded once and shared by every preset"""

    def __init__(self, data: CellData):
        self.fit: Dataset = (encode_windows(data.fit, data.stats), LabeledCorpus.labels(data.fit))
        self.valid: Dataset = (encode_windows(data.valid, data.stats), LabeledCorpus.labels(data.valid))
        self.test: Dataset = (encode_windows(data.test, data.stats), LabeledCorpus.labels(data.test))


def evaluate_cnn(
    name: str, encoded: _EncodedCell, tcfg: TrainConfig
) -> Tuple[ModelOutcome, ModelParams]:
    config = ModelConfig.preset(name)
    result = train(config, encoded.fit, encoded.valid, tcfg)
    test_x, test_y = encoded.test
    outcome = ModelOutcome(
        model=name,
        confusion=confusion(predict_batch(config, result.params, test_x), test_y),
        epochs_run=len(result.history.epochs),
        best_epoch=result.history.best_epoch,
        valid_da=result.history.best_valid_da,
    )
    return outcome, result.params


def evaluate_cart(data: CellData, config: RunConfig) -> Tuple[ModelOutcome, TreeNode]:
    mode = config.cart.feature_mode
    tree = train_cart(
        cart_features(data.train, data.stats, mode), LabeledCorpus.labels(data.train),
        config.cart.max_depth, config.cart.min_leaf,
    )
    preds = predict_cart_batch(tree, cart_features(data.test, data.stats, mode))
    outcome = ModelOutcome(
        model=CART_MODEL,
        confusion=confusion(preds, LabeledCorpus.labels(data.test)),
        tree_depth=tree.depth(),
    )
    return outcome, tree


def train_seed(cell_seed: int, model: str) -> int:
    return derive_seed(cell_seed, "train", model)


# ============================================================================
# Grid cells
# ============================================================================

def _intensity_text(spec: FaultSpec) -> str:
    if spec.kind == FaultKind.MIXED:
        return spec.intensity_label
    return f"{spec.intensity:g}"


class CellTask(BaseModel):
    grid: str
    cell: int
    spec: FaultSpec
    train_spec: Optional[FaultSpec] = None
    seed_index: int
    seed: int
    models: List[str]
    config: RunConfig


class CellResult(BaseModel):
    """Everything a completed cell leaves on disk"""
    grid: str
    cell: int
    fault: str
    intensity: str
    intensity_value: Optional[float] = None
    seed_index: int
    seed: int
    train_size: int
    valid_size: int
    test_size: int
    skipped_degenerate: int = 0
    outcomes: List[ModelOutcome]

    def outcome(self, model: str) -> Optional[ModelOutcome]:
        return next((o for o in self.outcomes if o.model == model), None)


def run_cell(task: CellTask, windows: Sequence[Window]) -> CellResult:
    """Build the cell corpus, train every model on it and score the test split."""
    config = task.config
    data = prepare_cell_data(
        windows, task.spec, config, derive_seed(task.seed, "corpus"), task.train_spec
    )

    encoded: Optional[_EncodedCell] = None
    outcomes = []
    for model in task.models:
        if model == CART_MODEL:
            outcome, _ = evaluate_cart(data, config)
        else:
            if encoded is None:
                encoded = _EncodedCell(data)
            tcfg = config.train.model_copy(update={"seed": train_seed(task.seed, model)})
            outcome, _ = evaluate_cnn(model, encoded, tcfg)
        outcomes.append(outcome)
        logger.info(
            f"[{task.grid} #{task.cell}] {model} {task.spec.label} {_intensity_text(task.spec)} "
            f"seed#{task.seed_index}: DA={da(outcome.confusion):.4f}"
        )

    return CellResult(
        grid=task.grid,
        cell=task.cell,
        fault=task.spec.label,
        intensity=_intensity_text(task.spec),
        intensity_value=task.spec.intensity,
        seed_index=task.seed_index,
        seed=task.seed,
        train_size=len(data.train),
        valid_size=len(data.valid),
        test_size=len(data.test),
        skipped_degenerate=data.skipped_degenerate,
        outcomes=outcomes,
    )


_WORKER_WINDOWS: List[Window] = []


def _init_worker(windows: List[Window]) -> None:
    global _WORKER_WINDOWS
    _WORKER_WINDOWS = windows


def _run_cell_in_worker(task: CellTask) -> CellResult:
    return run_cell(task, _WORKER_WINDOWS)


def _execute(
    tasks: Sequence[CellTask], windows: Sequence[Window], jobs: int, on_done: Callable[[CellResult], None]
) -> None:
    """
    Run every task and hand each result to ``on_done`` as it completes.

    A failing cell does not stop the others: every cell that completes is
    still passed to ``on_done`` and the first error is raised once the grid
    has drained.
    """
    errors: List[Tuple[int, Exception]] = []

    def _failed(task: CellTask, error: Exception) -> None:
        logger.error(f"[{task.grid} #{task.cell}] failed: {error}")
        errors.append((task.cell, error))

    if jobs <= 1 or len(tasks) <= 1:
        for task in tasks:
            try:
                result = run_cell(task, windows)
            except Exception as e:
                _failed(task, e)
                continue
            on_done(result)
    else:
        workers = min(jobs, len(tasks))
        logger.info(f"Running {len(tasks)} cells on {workers} worker processes")
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(list(windows),)) as pool:
            futures = {pool.submit(_run_cell_in_worker, task): task for task in tasks}
            for future in as_completed(futures):
                try:
                    result = future.result()
                except Exception as e:
                    _failed(futures[future], e)
                    continue
                on_done(result)

    if errors:
        cell, first = min(errors, key=lambda item: item[0])
        logger.error(f"{len(errors)} of {len(tasks)} cells failed; first failure in cell {cell}")
        raise first


def _restore_cells(storage: RunStorage, grid: str, tasks: Sequence[CellTask]) -> Dict[int, CellResult]:
    by_cell = {t.cell: t for t in tasks}
    restored: Dict[int, CellResult] = {}
    for index, record in storage.completed_cells(grid).items():
        result = CellResult(**record)
        task = by_cell.get(index)
        if task is None or result.seed != task.seed or (result.fault, result.intensity) != (
            task.spec.label, _intensity_text(task.spec)
        ):
            raise ExperimentError(
                f"Cell {index} of {grid} on disk does not match this configuration; "
                "start a fresh run directory instead of resuming"
            )
        restored[index] = result
    return restored


@trace_pipeline
def run_grid(
    grid: str,
    tasks: Sequence[CellTask],
    windows: Sequence[Window],
    jobs: int = 1,
    storage: Optional[RunStorage] = None,
    resume: bool = False,
) -> List[CellResult]:
    """
    Run every cell of a grid, flushing each one as soon as it completes.

    Returns:
        Cell results ordered by cell index
    """
    done: Dict[int, CellResult] = {}
    if storage is not None:
        if resume:
            done = _restore_cells(storage, grid, tasks)
            if done:
                logger.info(f"Resuming {grid}: {len(done)} of {len(tasks)} cells already on disk")
        else:
            storage.clear_cells(grid)
    run_dir = storage.run_dir if storage else None

    def on_done(result: CellResult) -> None:
        done[result.cell] = result
        if storage is not None:
            storage.append_cell(grid, result.model_dump(mode="json"))
        record_event(run_dir, EventType.CELL_COMPLETED, {
            "grid": grid, "cell": result.cell, "fault": result.fault,
            "intensity": result.intensity, "seed_index": result.seed_index,
        })

    _execute([t for t in tasks if t.cell not in done], windows, jobs, on_done)
    record_event(run_dir, EventType.GRID_COMPLETED, {"grid": grid, "cells": len(tasks)})
    return [done[t.cell] for t in sorted(tasks, key=lambda t: t.cell)]


# ============================================================================
# Reports
# ============================================================================

class ReportRow(BaseModel):
    """Seed-pooled result of one (model, fault, intensity)"""
    model: str
    fault_kind: str
    intensity: str
    intensity_value: Optional[float] = None
    seed_count: int
    confusion: Confusion
    da: float
    tpr: Optional[float] = None
    pre: Optional[float] = None
    da_std: Optional[float] = None
    tpr_std: Optional[float] = None
    pre_std: Optional[float] = None


def _seed_std(values: List[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    if len(defined) == 1:
        return 0.0
    return float(np.std(defined, ddof=1))


def _percent(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(100.0 * value, 2)


class EvalReport(BaseModel):
    """
    Report of one grid.

    DA/TPR/PRE of a row are computed from the confusion counts summed over
    seeds, so they can always be recomputed from the stored counts. The
    ``*_std`` fields are the spread of the per-seed values.
    """
    name: str
    data_source: str
    rows: List[ReportRow] = Field(default_factory=list)
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def from_cells(
        cls, name: str, cells: Sequence[CellResult], models: Sequence[str],
        data_source: str, metadata: Optional[Dict[str, Any]] = None,
    ) -> "EvalReport":
        grouped: Dict[Tuple[str, str], List[CellResult]] = {}
        for cell in sorted(cells, key=lambda c: c.cell):
            grouped.setdefault((cell.fault, cell.intensity), []).append(cell)

        rows = []
        for (fault, intensity), group in grouped.items():
            for model in models:
                per_seed = [c.outcome(model).confusion for c in group if c.outcome(model) is not None]
                if not per_seed:
                    continue
                pooled = sum(per_seed, Confusion())
                rows.append(ReportRow(
                    model=model,
                    fault_kind=fault,
                    intensity=intensity,
                    intensity_value=group[0].intensity_value,
                    seed_count=len(per_seed),
                    confusion=pooled,
                    da=da(pooled),
                    tpr=safe_metric(tpr, pooled),
                    pre=safe_metric(pre, pooled),
                    da_std=_seed_std([da(c) for c in per_seed]),
                    tpr_std=_seed_std([safe_metric(tpr, c) for c in per_seed]),
                    pre_std=_seed_std([safe_metric(pre, c) for c in per_seed]),
                ))
        return cls(name=name, data_source=data_source, rows=rows, metadata=metadata or {})

    def row(self, model: str, intensity: Union[str, float]) -> Optional[ReportRow]:
        for r in self.rows:
            if r.model != model:
                continue
            if isinstance(intensity, str) and r.intensity == intensity:
                return r
            if not isinstance(intensity, str) and r.intensity_value is not None and math.isclose(r.intensity_value, intensity):
                return r
        return None

    def to_frame(self) -> pd.DataFrame:
        """CSV layout: metrics as percentages with two decimals, undefined left blank"""
        records = []
        for r in self.rows:
            records.append({
                "model": r.model,
                "fault_kind": r.fault_kind,
                "intensity": r.intensity,
                "seed_count": r.seed_count,
                "tp": r.confusion.tp,
                "fp": r.confusion.fp,
                "tn": r.confusion.tn,
                "fn": r.confusion.fn,
                "DA": _percent(r.da),
                "TPR": _percent(r.tpr),
                "PRE": _percent(r.pre),
                "DA_std": _percent(r.da_std),
                "TPR_std": _percent(r.tpr_std),
                "PRE_std": _percent(r.pre_std),
                "data_source": self.data_source,
            })
        columns = ["model", "fault_kind", "intensity", "seed_count", "tp", "fp", "tn", "fn",
                   "DA", "TPR", "PRE", "DA_std", "TPR_std", "PRE_std", "data_source"]
        return pd.DataFrame(records, columns=columns)


def _cell_seed(config: RunConfig, grid: str, cell: int) -> int:
    return derive_seed(config.master_seed, grid, cell)


@trace_pipeline
def run_single_fault_grid(
    windows: Sequence[Window],
    kind: FaultKind,
    config: RunConfig,
    models: Optional[Sequence[str]] = None,
    intensities: Optional[Sequence[float]] = None,
    storage: Optional[RunStorage] = None,
    resume: bool = False,
) -> EvalReport:
    """
    Sweep one single-fault kind over its intensities, ``config.seed_count``
    repetitions each.

    Every intensity gets freshly trained models unless ``config.train_once``
    is set, in which case each seed repetition trains its models once at the
    middle grid intensity and tests them at every intensity.
    """
    if kind not in SINGLE_KINDS:
        raise ValueError(f"{kind.value} is not a single fault kind")
    models = list(models or config.models)
    intensities = list(intensities if intensities is not None else config.grid(kind))
    name = grid_name(kind)
    train_spec = FaultSpec.single(kind, config.train_intensity(kind), config.fault_w) if config.train_once else None

    tasks = []
    for i, intensity in enumerate(intensities):
        spec = FaultSpec.single(kind, intensity, config.fault_w)
        for s in range(config.seed_count):
            cell = i * config.seed_count + s
            # train-once cells of one seed index rebuild the same training corpus and model
            if train_spec is not None:
                seed = derive_seed(config.master_seed, name, "train-once", s)
            else:
                seed = _cell_seed(config, name, cell)
            tasks.append(CellTask(
                grid=name, cell=cell, spec=spec, train_spec=train_spec, seed_index=s,
                seed=seed, models=models, config=config,
            ))

    cells = run_grid(name, tasks, windows, config.jobs, storage, resume)
    return EvalReport.from_cells(
        name, cells, models, config.data_source,
        {"kind": kind.value, "intensities": intensities, "train_once": config.train_once},
    )


@trace_pipeline
def run_mixed_fault_suite(
    windows: Sequence[Window],
    config: RunConfig,
    models: Optional[Sequence[str]] = None,
    storage: Optional[RunStorage] = None,
    resume: bool = False,
) -> EvalReport:
    """noise+fixed, noise+short and short+fixed for each CNN preset (r, f, G from config)."""
    models = list(models or config.cnn_models)
    if not models:
        raise ExperimentError("The mixed suite needs at least one CNN preset")
    specs = mixed_suite_specs(config.mixed_r, config.mixed_f, config.mixed_G, config.fault_w)

    tasks = []
    for i, spec in enumerate(specs):
        for s in range(config.seed_count):
            cell = i * config.seed_count + s
            tasks.append(CellTask(
                grid=MIXED_GRID, cell=cell, spec=spec, seed_index=s,
                seed=_cell_seed(config, MIXED_GRID, cell), models=models, config=config,
            ))

    cells = run_grid(MIXED_GRID, tasks, windows, config.jobs, storage, resume)
    return EvalReport.from_cells(
        MIXED_GRID, cells, models, config.data_source,
        {"r": config.mixed_r, "f": config.mixed_f, "G": config.mixed_G},
    )


# ============================================================================
# Trend checks
# ============================================================================

class TrendCheck(BaseModel):
    name: str
    passed: Optional[bool] = None
    detail: str = ""


def _compare(report: Optional[EvalReport], model: str, high: float, low: float, name: str) -> TrendCheck:
    if report is None:
        return TrendCheck(name=name, detail="grid not run")
    hi_row, lo_row = report.row(model, high), report.row(model, low)
    if hi_row is None or lo_row is None:
        return TrendCheck(name=name, detail=f"{model} rows for {high:g} / {low:g} missing")
    return TrendCheck(
        name=name,
        passed=hi_row.da >= lo_row.da,
        detail=f"DA {hi_row.da:.4f} at {high:g} vs {lo_row.da:.4f} at {low:g}",
    )


def trend_checks(reports: Dict[str, EvalReport], reference_model: str = "M2") -> List[TrendCheck]:
    """
    Qualitative trends expected from the single-fault grids.

    Checks that detection improves with noise and short-fault intensity for
    the reference model, and that every CNN preset matches or beats CART at
    each fixed-fault intensity. A check whose rows are missing has
    ``passed=None``.
    """
    checks = [
        _compare(reports.get(grid_name(FaultKind.NOISE)), reference_model, 3.0, 0.5,
                 f"noise: {reference_model} DA at r=3 >= DA at r=0.5"),
        _compare(reports.get(grid_name(FaultKind.SHORT)), reference_model, 10.0, 1.5,
                 f"short: {reference_model} DA at f=10 >= DA at f=1.5"),
    ]

    fixed = reports.get(grid_name(FaultKind.FIXED))
    name = "fixed: every CNN DA >= CART DA at each G"
    if fixed is None:
        checks.append(TrendCheck(name=name, detail="grid not run"))
        return checks

    cart_rows = [r for r in fixed.rows if r.model == CART_MODEL]
    cnn_rows = [r for r in fixed.rows if r.model != CART_MODEL]
    if not cart_rows or not cnn_rows:
        checks.append(TrendCheck(name=name, detail="needs CART and at least one CNN preset"))
        return checks

    failures = []
    for cart_row in cart_rows:
        for r in cnn_rows:
            if r.intensity == cart_row.intensity and r.da < cart_row.da:
                failures.append(f"{r.model}@G={r.intensity} {r.da:.4f} < {cart_row.da:.4f}")
    checks.append(TrendCheck(name=name, passed=not failures, detail="; ".join(failures) or "all hold"))
    return checks


# ============================================================================
# Full reproduction
# ============================================================================

# settings that do not change results
_RUNTIME_ONLY = ("jobs", "output_dir")


def _identity(config_dump: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in config_dump.items() if k not in _RUNTIME_ONLY}


def run_metadata(config: RunConfig, data: LoadedData) -> Dict[str, Any]:
    """Configuration plus every default a reader needs to interpret the reports."""
    return {
        "sensorlens_version": __version__,
        "data_source": data.source,
        "window_counts": {str(k): v for k, v in data.window_counts.items()},
        "total_windows": len(data.windows),
        "skipped_rows": data.skipped_rows,
        "config": config.model_dump(mode="json"),
        "defaults": {
            "rng": RNG_NAME,
            "activations": "relu after C1, C2, F1; softmax output",
            "loss": "mean cross-entropy",
            "init": "zero biases, weights uniform in +-sqrt(6/fan_in)",
            "optimizer": "sgd with momentum",
            "learning_rate": config.train.learning_rate,
            "momentum": config.train.momentum,
            "batch_size": config.train.batch_size,
            "max_epochs": config.train.max_epochs,
            "patience": config.train.patience,
            "normalization": "per-feature min/max of the training split, clamped",
            "gray_quantization": "round half up",
            "noise_sigma_reference": config.noise_reference,
            "window_stride": config.window_stride or config.window_length,
            "prediction_tie": "abnormal",
            "cart": config.cart.model_dump(),
            "seeds": config.seed_count,
        },
        "param_counts": {m: param_count(ModelConfig.preset(m)) for m in config.cnn_models},
    }


@trace_pipeline
def run_reproduction(
    config: RunConfig, data: LoadedData, storage: RunStorage, resume: bool = False
) -> Dict[str, EvalReport]:
    """
    The three single-fault grids and the mixed suite, each written as a CSV.

    Metadata is written before the first cell and again with the trend
    checks once every grid has finished.
    """
    if resume:
        previous = storage.read_metadata()
        if previous is not None and _identity(previous.get("config") or {}) != _identity(config.model_dump(mode="json")):
            raise ExperimentError(f"{storage.run_dir} was produced by a different configuration")

    metadata = run_metadata(config, data)
    storage.write_metadata(metadata)

    reports: Dict[str, EvalReport] = {}
    for kind in SINGLE_KINDS:
        report = run_single_fault_grid(data.windows, kind, config, storage=storage, resume=resume)
        storage.write_report(report.name, report.to_frame())
        reports[report.name] = report

    if config.cnn_models:
        report = run_mixed_fault_suite(data.windows, config, storage=storage, resume=resume)
        storage.write_report(report.name, report.to_frame())
        reports[report.name] = report
    else:
        logger.warning("No CNN preset selected; skipping the mixed suite")

    checks = trend_checks(reports)
    metadata["trend_checks"] = [c.model_dump() for c in checks]
    storage.write_metadata(metadata)
    for c in checks:
        logger.info(f"Trend check '{c.name}': {c.passed} ({c.detail})")
    return reports


# ============================================================================
# Single model train / eval
# ============================================================================

def data_fingerprint(windows: Sequence[Window]) -> str:
    """SHA-256 over the id and readings of every window, in order"""
    digest = hashlib.sha256()
    for w in windows:
        digest.update(w.window_id.encode("utf-8"))
        digest.update(np.ascontiguousarray(w.features, dtype=np.float64).tobytes())
    return digest.hexdigest()


def _model_extra(
    windows: Sequence[Window], spec: FaultSpec, data: CellData, config: RunConfig, outcome: ModelOutcome
) -> Dict[str, Any]:
    return {
        "data": {
            "source": config.data_source,
            "nodes": list(config.nodes),
            "window_count": len(windows),
            "fingerprint": data_fingerprint(windows),
        },
        "fault": spec.model_dump(mode="json"),
        "corpus_seed": data.corpus_seed,
        "stats": data.stats.model_dump(),
        "abnormal_fraction": config.abnormal_fraction,
        "split": config.split,
        "validation_fraction": config.validation_fraction,
        "noise_reference": config.noise_reference,
        "data_source": config.data_source,
        "test_confusion": outcome.confusion.model_dump(),
    }


@trace_pipeline
def train_and_save(
    windows: Sequence[Window], spec: FaultSpec, model: str, config: RunConfig, path: Path
) -> ModelOutcome:
    """
    Train one model on one fault corpus, score its test split and save it.

    CNN presets are written as ``.npz``, CART as JSON. The file records the
    fault, corpus seed and normalization stats so ``evaluate_saved`` can
    rebuild the exact same test split, plus a fingerprint of ``windows`` so
    it can refuse any other data.
    """
    seed = derive_seed(config.master_seed, "train-model", spec.label, _intensity_text(spec))
    data = prepare_cell_data(windows, spec, config, derive_seed(seed, "corpus"))

    if model == CART_MODEL:
        outcome, tree = evaluate_cart(data, config)
        save_cart(path, CartModelFile(
            feature_mode=config.cart.feature_mode,
            max_depth=config.cart.max_depth,
            min_leaf=config.cart.min_leaf,
            extra=_model_extra(windows, spec, data, config, outcome),
            tree=tree,
        ))
    else:
        tcfg = config.train.model_copy(update={"seed": train_seed(seed, model)})
        outcome, params = evaluate_cnn(model, _EncodedCell(data), tcfg)
        save_model(path, ModelConfig.preset(model), params, _model_extra(windows, spec, data, config, outcome))
    return outcome


def _check_same_data(path: Path, recorded: Dict[str, Any], windows: Sequence[Window]) -> None:
    if recorded["fingerprint"] == data_fingerprint(windows):
        return
    raise ExperimentError(
        f"{path} was trained on {recorded['window_count']} {recorded['source']} windows of nodes "
        f"{recorded['nodes']}, but {len(windows)} different windows were loaded; "
        "evaluate with the data, seed and window cap used for training"
    )


@trace_pipeline
def evaluate_saved(
    windows: Sequence[Window],
    path: Path,
    expected_model: Optional[str] = None,
    spec: Optional[FaultSpec] = None,
    clean: bool = False,
) -> Tuple[str, Confusion]:
    """
    Score a saved model on a corpus rebuilt from its file.

    Args:
        spec: Evaluate on this fault instead of the one the model was trained on
        clean: Score the un-faulted versions of the test windows (all normal)

    Raises:
        ModelVersionError: If the file holds a different model than expected
        ExperimentError: If ``windows`` differ from the training data, or the
            rebuilt test split scores differently than at training time
    """
    path = Path(path)
    if path.suffix == ".json":
        cart = load_cart(path)
        if expected_model not in (None, CART_MODEL):
            raise ModelVersionError(f"{path} holds a CART model, config asks for {expected_model}")
        model, extra = CART_MODEL, cart.extra
    else:
        model_config, params, extra = load_model(path, expected_model)
        model = model_config.name

    try:
        _check_same_data(path, extra["data"], windows)
        eval_spec = spec or FaultSpec(**extra["fault"])
        stats = NormStats(**extra["stats"])
        corpus = build_corpus(
            windows, eval_spec, extra["abnormal_fraction"], extra["split"],
            int(extra["corpus_seed"]), extra["noise_reference"],
        )
    except KeyError as e:
        raise ExperimentError(f"{path} lacks the corpus description needed for eval: {e}") from e

    test = corpus.test
    if clean:
        by_id = {w.window_id: w for w in windows}
        test = [by_id[w.window_id] for w in test]
    labels = LabeledCorpus.labels(test)

    if model == CART_MODEL:
        preds = predict_cart_batch(cart.tree, cart_features(test, stats, cart.feature_mode))
    else:
        preds = predict_batch(model_config, params, encode_windows(test, stats))
    result = confusion(preds, labels)

    if spec is None and not clean and "test_confusion" in extra:
        recorded = Confusion(**extra["test_confusion"])
        if result != recorded:
            raise ExperimentError(
                f"{path} scores {result.model_dump()} on its rebuilt test split, "
                f"training recorded {recorded.model_dump()}"
            )
    return model, result


# ============================================================================
# Hyperparameter sweep
# ============================================================================

class SweepGrid(BaseModel):
    learning_rates: List[float] = Field(default_factory=lambda: [0.001, 0.01, 0.05])
    batch_sizes: List[int] = Field(default_factory=lambda: [16, 32, 64])
    momenta: List[float] = Field(default_factory=lambda: [0.0, 0.9])

    @field_validator("learning_rates", "batch_sizes", "momenta")
    @classmethod
    def _non_empty(cls, v: list) -> list:
        if not v:
            raise ValueError("sweep axes must not be empty")
        return v

    def trials(self) -> List[Tuple[float, int, float]]:
        return list(itertools.product(self.learning_rates, self.batch_sizes, self.momenta))


@trace_pipeline
def run_hyperparameter_sweep(
    windows: Sequence[Window],
    spec: FaultSpec,
    model: str,
    config: RunConfig,
    grid: Optional[SweepGrid] = None,
    log: Optional[SweepLog] = None,
) -> List[SweepTrial]:
    """
    Train ``model`` on one fixed corpus for every learning rate x batch size
    x momentum combination and log each trial.

    A diverging trial is logged with its epoch and no metrics instead of
    aborting the sweep. Trials of an earlier sweep in ``log`` are dropped first.
    """
    if model == CART_MODEL:
        raise ExperimentError("Sweeps tune SGD hyperparameters; pick a CNN preset")
    grid = grid or SweepGrid()
    seed = derive_seed(config.master_seed, "sweep", spec.label, _intensity_text(spec))
    data = prepare_cell_data(windows, spec, config, derive_seed(seed, "corpus"))
    encoded = _EncodedCell(data)
    run_dir = log.run_dir if log else None
    if log is not None:
        log.reset()
    record_event(run_dir, EventType.CORPUS_BUILT, {
        "fault": spec.label, "intensity": _intensity_text(spec), "corpus_seed": data.corpus_seed,
        "fit": len(data.fit), "valid": len(data.valid), "test": len(data.test),
    })

    trials = []
    for i, (lr, batch_size, momentum) in enumerate(grid.trials()):
        tcfg = TrainConfig(**{
            **config.train.model_dump(),
            "learning_rate": lr, "batch_size": batch_size, "momentum": momentum,
            "seed": train_seed(seed, model),
        })
        common = dict(
            trial=i, model=model, fault=spec.label, intensity=_intensity_text(spec),
            learning_rate=lr, batch_size=batch_size, momentum=momentum,
        )
        try:
            outcome, _ = evaluate_cnn(model, encoded, tcfg)
        except TrainingError as e:
            logger.warning(f"Sweep trial {i} (lr={lr}, batch={batch_size}, momentum={momentum}) diverged: {e}")
            trial = SweepTrial(
                **common, epochs_run=e.epoch, best_epoch=0, valid_da=0.0,
                confusion=Confusion(), metadata={"diverged_at_epoch": e.epoch},
            )
        else:
            c = outcome.confusion
            trial = SweepTrial(
                **common, epochs_run=outcome.epochs_run, best_epoch=outcome.best_epoch,
                valid_da=outcome.valid_da, confusion=c,
                DA=da(c), TPR=safe_metric(tpr, c), PRE=safe_metric(pre, c),
            )

        if log is not None:
            log.append_trial(trial)
        record_event(run_dir, EventType.SWEEP_TRIAL, {
            "trial": i, "learning_rate": lr, "batch_size": batch_size,
            "momentum": momentum, "DA": trial.DA,
        })
        trials.append(trial)
    return trials
