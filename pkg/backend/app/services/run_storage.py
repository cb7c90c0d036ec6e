import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd

from app.core.config import settings

logger = logging.getLogger(__name__)


class StorageError(Exception):
    """Custom exception for run directory I/O errors"""
    pass


class RunStorage:
    """
    Persistent layout of one experiment run.

    <run_dir>/metadata.json        run configuration and design defaults
    <run_dir>/cells/<grid>.jsonl   one line per completed grid cell
    <run_dir>/<report>.csv         aggregated reports
    """

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.cells_dir = self.run_dir / "cells"
        self.metadata_file = self.run_dir / "metadata.json"

    @classmethod
    def for_run(cls, name: str, base_dir: Optional[Path] = None) -> "RunStorage":
        """Run directory ``<base_dir>/<name>``; base defaults to SENSORLENS_OUTPUT_DIR."""
        base = Path(base_dir) if base_dir else settings.get_output_path()
        return cls(base / name)

    def _write_json(self, path: Path, data: Dict[str, Any]) -> None:
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(data, f, indent=2, ensure_ascii=False, default=str)
        except OSError as e:
            raise StorageError(f"Failed to write {path}: {e}") from e

    def write_metadata(self, metadata: Dict[str, Any]) -> Path:
        """Store run metadata as given."""
        self._write_json(self.metadata_file, metadata)
        logger.info(f"Run metadata saved to {self.metadata_file}")
        return self.metadata_file

    def read_metadata(self) -> Optional[Dict[str, Any]]:
        if not self.metadata_file.exists():
            return None
        try:
            with open(self.metadata_file, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Failed to load run metadata: {e}")
            return None

    def _cells_file(self, grid: str) -> Path:
        return self.cells_dir / f"{grid}.jsonl"

    def append_cell(self, grid: str, record: Dict[str, Any]) -> None:
        """
        Flush one completed cell to disk immediately.

        Args:
            grid: Grid name, e.g. ``single_noise``
            record: JSON-serializable cell result carrying a ``cell`` index
        """
        self.cells_dir.mkdir(parents=True, exist_ok=True)
        path = self._cells_file(grid)
        try:
            with open(path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")
                f.flush()
        except OSError as e:
            raise StorageError(f"Failed to append cell to {path}: {e}") from e
        logger.debug(f"Cell {record.get('cell')} of {grid} flushed to {path.name}")

    def completed_cells(self, grid: str) -> Dict[int, Dict[str, Any]]:
        """Cells already on disk for ``grid``, keyed by cell index; later lines win."""
        path = self._cells_file(grid)
        if not path.exists():
            return {}

        cells: Dict[int, Dict[str, Any]] = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    # a run killed mid-write leaves at most one torn line
                    logger.warning(f"Ignoring torn line in {path.name}")
                    continue
                cells[int(record["cell"])] = record
        return cells

    def clear_cells(self, grid: str) -> None:
        self._cells_file(grid).unlink(missing_ok=True)

    def write_report(self, name: str, frame: pd.DataFrame) -> Path:
        """Write ``<run_dir>/<name>.csv``."""
        path = self.run_dir / f"{name}.csv"
        try:
            frame.to_csv(path, index=False)
        except OSError as e:
            raise StorageError(f"Failed to write {path}: {e}") from e
        logger.info(f"Report written: {path} ({len(frame)} rows)")
        return path

    def write_sweep(self, frame: pd.DataFrame) -> Path:
        """Tabular summary of a hyperparameter sweep, next to its JSONL log."""
        return self.write_report("sweep_summary", frame)

    def list_reports(self) -> List[str]:
        return sorted(p.stem for p in self.run_dir.glob("*.csv"))
