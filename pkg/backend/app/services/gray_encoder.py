"""Gray-image encoding of sensor windows and PGM/PNG export"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from app.services.sensor_ingest import FEATURES, WINDOW_LENGTH, Window

logger = logging.getLogger(__name__)

IMAGE_SIZE = 16
BLOCK_COLUMNS = 16
MAX_GRAY = 255
PGM_HEADER = b"P5\n16 16\n255\n"


class EncodingError(Exception):
    """Custom exception for encoding and image I/O errors"""
    pass


class NormStats(BaseModel):
    """Per-feature min/max used for min-max normalization"""
    minimums: List[float]
    maximums: List[float]

    @model_validator(mode="after")
    def _check_bounds(self) -> "NormStats":
        if len(self.minimums) != len(FEATURES) or len(self.maximums) != len(FEATURES):
            raise ValueError(f"stats need exactly {len(FEATURES)} features")
        if any(hi < lo for lo, hi in zip(self.minimums, self.maximums)):
            raise ValueError("max must be >= min for every feature")
        return self

    def as_arrays(self):
        return np.asarray(self.minimums, dtype=np.float64), np.asarray(self.maximums, dtype=np.float64)


class GrayImage(BaseModel):
    """16x16 gray-level image of one window"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pixels: np.ndarray
    source: Optional[str] = None

    @field_validator("pixels")
    @classmethod
    def _check_pixels(cls, v: np.ndarray) -> np.ndarray:
        if v.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"pixels must be {IMAGE_SIZE}x{IMAGE_SIZE}")
        if v.dtype != np.uint8:
            if np.any(v < 0) or np.any(v > MAX_GRAY):
                raise ValueError("gray levels must be in [0, 255]")
            v = v.astype(np.uint8)
        return v

    def as_input(self) -> np.ndarray:
        """Pixels scaled to [0, 1] as a (16, 16, 1) float64 tensor"""
        return (self.pixels.astype(np.float64) / MAX_GRAY)[:, :, np.newaxis]

    def flatten(self) -> np.ndarray:
        """256 normalized gray values in row-major order"""
        return self.pixels.astype(np.float64).reshape(-1) / MAX_GRAY


def fit_stats(train_windows: Sequence[Window]) -> NormStats:
    """
    Per-feature min/max over the given (training) windows.

    Raises:
        EncodingError: If no window is given
    """
    if not train_windows:
        raise EncodingError("Cannot fit normalization stats on zero windows")
    stacked = np.concatenate([w.features for w in train_windows], axis=0)
    return NormStats(
        minimums=stacked.min(axis=0).tolist(),
        maximums=stacked.max(axis=0).tolist(),
    )


def normalize(x: float, minimum: float, maximum: float) -> float:
    """(x - min) / (max - min) clamped to [0, 1]; a constant feature maps to 0."""
    if maximum < minimum:
        raise ValueError("max must be >= min")
    if maximum == minimum:
        return 0.0
    return min(max((x - minimum) / (maximum - minimum), 0.0), 1.0)


def normalize_array(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Vectorized normalize over an (n, 4) feature matrix"""
    lo, hi = stats.as_arrays()
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (values - lo) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0)


def to_gray(x_norm) -> np.ndarray:
    """X' * 255 rounded half up, as uint8. Accepts scalars or arrays."""
    levels = np.floor(np.asarray(x_norm, dtype=np.float64) * MAX_GRAY + 0.5)
    return np.clip(levels, 0, MAX_GRAY).astype(np.uint8)


def layout_matrix(gray: np.ndarray) -> np.ndarray:
    """
    Arrange a (64, 4) gray matrix into the interleaved 16x16 layout.

    Row 4k+j holds feature j at samples 16k .. 16k+15.
    """
    blocks = gray.reshape(len(FEATURES), BLOCK_COLUMNS, len(FEATURES))
    return blocks.transpose(0, 2, 1).reshape(IMAGE_SIZE, IMAGE_SIZE)


def decode_image(image: GrayImage) -> np.ndarray:
    """Inverse of the layout: back to a (64, 4) gray matrix in sample order."""
    blocks = image.pixels.reshape(len(FEATURES), len(FEATURES), BLOCK_COLUMNS)
    return blocks.transpose(0, 2, 1).reshape(WINDOW_LENGTH, len(FEATURES))


def encode_window(window: Window, stats: NormStats) -> GrayImage:
    """Normalize, quantize and lay out one 64-sample window."""
    if window.features.shape != (WINDOW_LENGTH, len(FEATURES)):
        raise EncodingError(f"Window {window.window_id} must hold {WINDOW_LENGTH} samples")
    gray = to_gray(normalize_array(window.features, stats))
    return GrayImage(pixels=layout_matrix(gray), source=window.window_id)


def encode_windows(windows: Sequence[Window], stats: NormStats) -> np.ndarray:
    """Batch of CNN inputs, shape (n, 16, 16, 1), values gray/255"""
    batch = np.empty((len(windows), IMAGE_SIZE, IMAGE_SIZE, 1), dtype=np.float64)
    for i, window in enumerate(windows):
        batch[i] = encode_window(window, stats).as_input()
    return batch


def export_pgm(image: GrayImage, path: Path) -> Path:
    """Write a binary (P5) 16x16 PGM, maxval 255, row-major."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(PGM_HEADER)
            f.write(np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes())
    except OSError as e:
        raise EncodingError(f"Failed to write {path}: {e}") from e
    logger.debug(f"Wrote PGM {path}")
    return path


def read_pgm(path: Path) -> GrayImage:
    """Read back a PGM written by export_pgm."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise EncodingError(f"Failed to read {path}: {e}") from e
    if not data.startswith(PGM_HEADER) or len(data) != len(PGM_HEADER) + IMAGE_SIZE * IMAGE_SIZE:
        raise EncodingError(f"{path} is not a 16x16 8-bit P5 image")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=len(PGM_HEADER)).reshape(IMAGE_SIZE, IMAGE_SIZE)
    return GrayImage(pixels=pixels.copy(), source=Path(path).stem)


def export_png(image: GrayImage, path: Path, scale: int = 16) -> Path:
    """Enlarged PNG preview (nearest neighbour) for eyeballing images."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    enlarged = cv2.resize(
        image.pixels, (IMAGE_SIZE * scale, IMAGE_SIZE * scale), interpolation=cv2.INTER_NEAREST
    )
    if not cv2.imwrite(str(path), enlarged):
        raise EncodingError(f"OpenCV could not write {path}")
    return path
