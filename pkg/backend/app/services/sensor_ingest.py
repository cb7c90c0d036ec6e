"""Sensor log ingestion: IBRL parsing, per-node streams and sliding windows"""

import math
import logging
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.observability import trace_pipeline
from app.core.seeding import make_rng
from app.services.fault_spec import FaultSpec

logger = logging.getLogger(__name__)

WINDOW_LENGTH = 64
FEATURES = ("temperature", "humidity", "light", "voltage")
TEMPERATURE = 0

# date, time, epoch, moteid, temperature, humidity, light, voltage
IBRL_COLUMNS = 8


class IngestError(Exception):
    """Base exception for ingestion errors"""
    pass


class DatasetReadError(IngestError):
    """The dataset source could not be read"""
    pass


class EmptyInputError(IngestError):
    """No parseable line in the input"""
    pass


class EmptyStreamError(IngestError):
    """No samples for the requested node"""
    pass


class Label(str, Enum):
    """Window class; abnormal is the positive class"""
    NORMAL = "normal"
    ABNORMAL = "abnormal"


class Sample(BaseModel):
    """One timestamped reading of the four features from one node"""
    model_config = ConfigDict(frozen=True)

    epoch: int
    node_id: int = Field(..., ge=1)
    temperature: float
    humidity: float
    light: float
    voltage: float

    @field_validator("temperature", "humidity", "light", "voltage")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("feature values must be finite")
        return v

    def features(self) -> tuple:
        return (self.temperature, self.humidity, self.light, self.voltage)


class IbrlParseResult(BaseModel):
    """Samples parsed from an IBRL source plus the number of skipped lines"""
    samples: List[Sample]
    skipped: int = 0


class NodeStream(BaseModel):
    """Ordered readings of a single node"""
    node_id: int = Field(..., ge=1)
    samples: List[Sample]

    @model_validator(mode="after")
    def _check_order(self) -> "NodeStream":
        for prev, cur in zip(self.samples, self.samples[1:]):
            if cur.epoch <= prev.epoch:
                raise ValueError("epochs must be strictly increasing")
        if any(s.node_id != self.node_id for s in self.samples):
            raise ValueError("all samples must share node_id")
        return self

    def __len__(self) -> int:
        return len(self.samples)

    def epochs(self) -> np.ndarray:
        return np.fromiter((s.epoch for s in self.samples), dtype=np.int64, count=len(self.samples))

    def feature_matrix(self) -> np.ndarray:
        """(n, 4) float64 matrix in FEATURES order"""
        matrix = np.empty((len(self.samples), len(FEATURES)), dtype=np.float64)
        for i, s in enumerate(self.samples):
            matrix[i] = s.features()
        return matrix


class Window(BaseModel):
    """
    Consecutive samples of one node, the unit that gets labelled and encoded.

    ``features`` is an (L, 4) matrix in FEATURES order; ``epochs`` holds the
    matching epoch numbers.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    node_id: int = Field(..., ge=1)
    start_index: int = Field(..., ge=0)
    epochs: np.ndarray
    features: np.ndarray
    label: Label = Label.NORMAL
    fault_meta: Optional[FaultSpec] = None

    @model_validator(mode="after")
    def _check_window(self) -> "Window":
        if self.features.ndim != 2 or self.features.shape[1] != len(FEATURES):
            raise ValueError(f"features must have shape (L, {len(FEATURES)})")
        if self.epochs.shape != (self.features.shape[0],):
            raise ValueError("epochs and features disagree on length")
        if self.features.shape[0] > 1 and np.any(np.diff(self.epochs) <= 0):
            raise ValueError("epochs must be strictly increasing")
        if (self.label == Label.ABNORMAL) != (self.fault_meta is not None):
            raise ValueError("label is abnormal iff fault_meta is present")
        return self

    @property
    def window_id(self) -> str:
        return f"{self.node_id}:{self.start_index}"

    @property
    def temperature(self) -> np.ndarray:
        return self.features[:, TEMPERATURE]

    @property
    def is_abnormal(self) -> bool:
        return self.label == Label.ABNORMAL

    def samples(self) -> List[Sample]:
        return [
            Sample(epoch=int(e), node_id=self.node_id, temperature=row[0],
                   humidity=row[1], light=row[2], voltage=row[3])
            for e, row in zip(self.epochs, self.features.tolist())
        ]

    def with_fault(self, features: np.ndarray, spec: FaultSpec) -> "Window":
        """Copy of this window carrying faulted features and an abnormal label."""
        return Window(
            node_id=self.node_id,
            start_index=self.start_index,
            epochs=self.epochs,
            features=features,
            label=Label.ABNORMAL,
            fault_meta=spec,
        )


def _parse_line(line: str) -> Optional[Sample]:
    parts = line.split()
    if len(parts) != IBRL_COLUMNS:
        return None
    try:
        epoch = int(parts[2])
        node_id = int(parts[3])
        values = [float(p) for p in parts[4:]]
    except ValueError:
        return None
    if node_id < 1 or not all(math.isfinite(v) for v in values):
        return None
    return Sample(
        epoch=epoch,
        node_id=node_id,
        temperature=values[0],
        humidity=values[1],
        light=values[2],
        voltage=values[3],
    )


@trace_pipeline
def parse_ibrl(reader: Iterable[str]) -> IbrlParseResult:
    """
    Parse IBRL ``data.txt`` lines.

    Each row is whitespace separated: date, time, epoch, moteid, temperature,
    humidity, light, voltage. Rows with missing or non-finite values are
    dropped and counted; blank lines are ignored.

    Raises:
        EmptyInputError: If no line could be parsed
    """
    samples: List[Sample] = []
    skipped = 0

    for line in reader:
        if not line.strip():
            continue
        sample = _parse_line(line)
        if sample is None:
            skipped += 1
            continue
        samples.append(sample)

    if not samples:
        raise EmptyInputError(f"No parseable IBRL rows ({skipped} malformed)")

    logger.info(f"Parsed {len(samples)} IBRL samples, skipped {skipped} malformed lines")
    return IbrlParseResult(samples=samples, skipped=skipped)


def load_ibrl(path: Path) -> IbrlParseResult:
    """Read an IBRL file from disk and parse it."""
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as f:
            return parse_ibrl(f)
    except OSError as e:
        raise DatasetReadError(f"Cannot read dataset {path}: {e}") from e


def build_node_stream(samples: Sequence[Sample], node_id: int) -> NodeStream:
    """
    Select one node's samples, sort by epoch and drop duplicate epochs.

    The first occurrence of a duplicated epoch (in input order) is kept.

    Raises:
        EmptyStreamError: If the node has no samples
    """
    by_epoch = {}
    for sample in samples:
        if sample.node_id == node_id and sample.epoch not in by_epoch:
            by_epoch[sample.epoch] = sample

    if not by_epoch:
        raise EmptyStreamError(f"No samples for node {node_id}")

    ordered = [by_epoch[e] for e in sorted(by_epoch)]
    return NodeStream(node_id=node_id, samples=ordered)


def slide_windows(stream: NodeStream, L: int = WINDOW_LENGTH, stride: Optional[int] = None) -> List[Window]:
    """
    Cut a stream into consecutive windows of exactly ``L`` samples.

    ``stride`` defaults to ``L`` (non-overlapping windows). A trailing
    remainder shorter than ``L`` is discarded.
    """
    stride = L if stride is None else stride
    if L <= 0 or stride <= 0:
        raise ValueError("L and stride must be positive")

    n = len(stream)
    if n < L:
        return []

    epochs = stream.epochs()
    features = stream.feature_matrix()

    windows = []
    for m in range(0, n - L + 1, stride):
        windows.append(Window(
            node_id=stream.node_id,
            start_index=m,
            epochs=epochs[m:m + L].copy(),
            features=features[m:m + L].copy(),
        ))
    return windows


# Feature (centre, half-span, lower clip, upper clip, jitter std)
_SYNTH_PROFILE = (
    (22.5, 6.0, 15.0, 30.0, 0.15),    # temperature, degC
    (35.0, 8.0, 25.0, 45.0, 0.40),    # humidity, %RH
    (300.0, 320.0, 0.0, 600.0, 5.0),  # light, lux
    (2.55, 0.20, 2.3, 2.8, 0.005),    # voltage, V
)


def synth_stream(node_id: int, n: int, seed: int) -> NodeStream:
    """
    Deterministic pseudo-sensor stream for tests and smoke runs.

    Each feature is a slow sinusoid with a seeded period and phase plus small
    Gaussian jitter, clipped to an IBRL-like range.
    """
    if n <= 0:
        raise ValueError("n must be positive")

    rng = make_rng(seed)
    t = np.arange(n, dtype=np.float64)
    columns = []
    for centre, half_span, low, high, jitter in _SYNTH_PROFILE:
        period = rng.uniform(800.0, 3000.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = centre + half_span * np.sin(2.0 * np.pi * t / period + phase)
        wave = wave + rng.normal(0.0, jitter, n)
        columns.append(np.clip(wave, low, high))

    features = np.column_stack(columns)
    samples = [
        Sample(epoch=i + 1, node_id=node_id, temperature=row[0],
               humidity=row[1], light=row[2], voltage=row[3])
        for i, row in enumerate(features.tolist())
    ]
    return NodeStream(node_id=node_id, samples=samples)


def write_ibrl(streams: Iterable[NodeStream], path: Path) -> Path:
    """Write streams in IBRL text layout so every subcommand can read them back."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for stream in streams:
        for s in stream.samples:
            # synthetic clock: 31 s per epoch from midnight
            seconds = s.epoch * 31
            clock = f"{seconds // 3600 % 24:02d}:{seconds // 60 % 60:02d}:{seconds % 60:02d}.00000"
            rows.append(
                (s.epoch, s.node_id,
                 f"2004-02-28 {clock} {s.epoch} {s.node_id} {s.temperature!r} "
                 f"{s.humidity!r} {s.light!r} {s.voltage!r}")
            )
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", encoding="utf-8") as f:
        for _, _, text in rows:
            f.write(text + "\n")
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path
