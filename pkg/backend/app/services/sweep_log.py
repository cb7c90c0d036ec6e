"""
Sweep log for hyperparameter trials.

Each trial of a sweep is one JSON line in ``<run_dir>/sweep.jsonl``, so a
sweep can be inspected (or attached to a reproduction report) while it is
still running.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, Field

from app.services.metrics import Confusion

logger = logging.getLogger(__name__)


class SweepTrial(BaseModel):
    """One (learning rate, batch size, momentum) trial"""
    trial: int
    model: str
    fault: str
    intensity: str
    learning_rate: float
    batch_size: int
    momentum: float
    epochs_run: int
    best_epoch: int
    valid_da: float
    confusion: Confusion
    DA: Optional[float] = None
    TPR: Optional[float] = None
    PRE: Optional[float] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def to_json_line(self) -> str:
        """Serialize to JSON line for JSONL format"""
        return json.dumps(self.model_dump(), ensure_ascii=False)

    @classmethod
    def from_json_line(cls, line: str) -> "SweepTrial":
        return cls(**json.loads(line))


class SweepLog:
    """JSONL log of the trials of one sweep: <run_dir>/sweep.jsonl"""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log_file = self.run_dir / "sweep.jsonl"
        logger.info(f"SweepLog initialized: {self.log_file}")

    def reset(self) -> None:
        """Drop trials of an earlier sweep in the same run directory."""
        if self.log_file.exists():
            logger.info(f"Discarding {len(self.list_trials())} earlier trials in {self.log_file}")
            self.log_file.unlink()

    def append_trial(self, trial: SweepTrial) -> None:
        with open(self.log_file, "a", encoding="utf-8") as f:
            f.write(trial.to_json_line() + "\n")
        logger.debug(f"Appended sweep trial {trial.trial} to {self.log_file.name}")

    def list_trials(self) -> List[SweepTrial]:
        if not self.log_file.exists():
            return []

        trials = []
        with open(self.log_file, "r", encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    trials.append(SweepTrial.from_json_line(line))
        return trials

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for t in self.list_trials():
            rows.append({
                "trial": t.trial,
                "model": t.model,
                "fault": t.fault,
                "intensity": t.intensity,
                "learning_rate": t.learning_rate,
                "batch_size": t.batch_size,
                "momentum": t.momentum,
                "epochs_run": t.epochs_run,
                "best_epoch": t.best_epoch,
                "valid_da": t.valid_da,
                "DA": t.DA,
                "TPR": t.TPR,
                "PRE": t.PRE,
            })
        return pd.DataFrame(rows)

    def get_log_path(self) -> str:
        return str(self.log_file.resolve())
