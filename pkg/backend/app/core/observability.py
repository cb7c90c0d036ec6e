"""
Observability module for SensorLens pipeline tracing.

Provides the @trace_pipeline decorator for timing pipeline steps and
record_event for the per-run JSONL timeline.
"""

import time
import json
import logging
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)


def _short_repr(value: Any, limit: int = 120) -> str:
    """One-line description of an argument: arrays and collections by size only"""
    if isinstance(value, np.ndarray):
        return f"<ndarray {value.shape} {value.dtype}>"
    if isinstance(value, (list, tuple)):
        return f"<{type(value).__name__} of {len(value)}>"
    if isinstance(value, dict):
        return f"<dict of {len(value)}>"
    if isinstance(value, BaseModel):
        # windows, fault specs and configs print their class and first field
        fields = list(type(value).model_fields)
        head = f" {fields[0]}={getattr(value, fields[0])!r}" if fields else ""
        return f"<{type(value).__name__}{head}>"[:limit]
    text = repr(value)
    return text if len(text) <= limit else f"{text[:limit]}..."


def _describe_call(args: tuple, kwargs: dict) -> Dict[str, str]:
    described = {f"#{i}": _short_repr(a) for i, a in enumerate(args)}
    described.update({k: _short_repr(v) for k, v in kwargs.items()})
    return described


def trace_pipeline(func: Callable) -> Callable:
    """
    Decorator to trace pipeline step execution.

    Captures function name, argument summary, duration and any error, and
    logs them at DEBUG level.

    Usage:
        @trace_pipeline
        def build_corpus(windows, spec):
            ...
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        if not logger.isEnabledFor(logging.DEBUG):
            return func(*args, **kwargs)

        start_time = time.perf_counter()
        error_info = None

        try:
            return func(*args, **kwargs)
        except Exception as e:
            error_info = str(e)
            raise
        finally:
            duration_ms = (time.perf_counter() - start_time) * 1000
            status = "ERROR" if error_info else "OK"
            logger.debug(
                f"[TRACE] {func.__name__} - {status} - {duration_ms:.2f}ms "
                f"- {json.dumps(_describe_call(args, kwargs))}"
            )

    return wrapper


# ============================================================================
# Run Timeline Events
# ============================================================================

class EventType:
    """Constants for run timeline event types"""
    RUN_STARTED = "run_started"
    DATA_LOADED = "data_loaded"
    CORPUS_BUILT = "corpus_built"
    MODEL_TRAINED = "model_trained"
    CELL_COMPLETED = "cell_completed"
    GRID_COMPLETED = "grid_completed"
    IMAGE_EXPORTED = "image_exported"
    SWEEP_TRIAL = "sweep_trial"
    RUN_COMPLETED = "run_completed"
    RUN_FAILED = "run_failed"


def get_timeline_path(run_dir: Union[str, Path]) -> Path:
    """Path of the timeline JSONL file inside a run directory."""
    path = Path(run_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path / "timeline.jsonl"


def record_event(
    run_dir: Optional[Union[str, Path]],
    event_type: str,
    payload: Optional[Dict[str, Any]] = None
) -> None:
    """
    Record a structured timeline event for a run.

    Writes to the console log (INFO) and, when ``run_dir`` is given, appends
    to ``<run_dir>/timeline.jsonl``.

    Example:
        record_event(run_dir, EventType.CELL_COMPLETED, {"grid": "single_noise", "cell": 3})
    """
    payload = payload or {}
    event = {
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "event": event_type,
        "payload": payload,
    }

    logger.info(f"[TIMELINE] {event_type} | {json.dumps(payload, default=str)}")

    if run_dir is None:
        return

    try:
        with open(get_timeline_path(run_dir), "a", encoding="utf-8") as f:
            f.write(json.dumps(event, default=str) + "\n")
    except OSError as e:
        logger.warning(f"Failed to write timeline event to file: {e}")


def get_run_timeline(run_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    """Read all timeline events of a run, oldest first."""
    timeline_path = Path(run_dir) / "timeline.jsonl"
    if not timeline_path.exists():
        return []

    events = []
    for number, line in enumerate(timeline_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            # an interrupted run can leave a torn last line
            logger.warning(f"Skipping unreadable timeline line {number} in {timeline_path}")
    return events
