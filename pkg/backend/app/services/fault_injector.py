"""Fault injection into the temperature channel and labelled corpus assembly"""

import math
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.observability import trace_pipeline
from app.core.seeding import make_rng
from app.services.fault_spec import FAULT_SEGMENT_LENGTH, FaultKind, FaultSpec
from app.services.sensor_ingest import TEMPERATURE, Window

logger = logging.getLogger(__name__)

NOISE_REFERENCES = ("window", "node")


class FaultInjectionError(Exception):
    """Base exception for fault injection errors"""
    pass


class DegenerateWindowError(FaultInjectionError):
    """Noise scale is undefined because the window temperature is constant"""
    pass


class CorpusError(FaultInjectionError):
    """Not enough windows to honour the requested class balance and split"""
    pass


def _check_segment(window: Window, w: int) -> int:
    length = window.features.shape[0]
    if not 0 < w <= length:
        raise ValueError(f"w must be in (0, {length}], got {w}")
    return length


def temperature_std(window: Window) -> float:
    """Sample standard deviation of the window's temperature values"""
    return float(np.std(window.temperature, ddof=1))


def _noise_sigma(window: Window, r: float, sigma_ref: Optional[float]) -> float:
    reference = temperature_std(window) if sigma_ref is None else sigma_ref
    if not reference > 0 or not math.isfinite(reference):
        raise DegenerateWindowError(
            f"Window {window.window_id} has zero temperature variance; noise scale undefined"
        )
    return r * reference


def inject_noise(
    window: Window, r: float, w: int = FAULT_SEGMENT_LENGTH, seed: int = 0,
    sigma_ref: Optional[float] = None
) -> Window:
    """
    Add Gaussian noise to a contiguous run of ``w`` temperature values.

    The noise std is ``r`` times the window's pre-injection temperature std,
    or ``r * sigma_ref`` when a reference std is supplied.

    Raises:
        DegenerateWindowError: If the reference std is zero
    """
    if r <= 0:
        raise ValueError("r must be positive")
    length = _check_segment(window, w)
    sigma = _noise_sigma(window, r, sigma_ref)

    rng = make_rng(seed)
    start = int(rng.integers(0, length - w + 1))
    features = window.features.copy()
    features[start:start + w, TEMPERATURE] += rng.normal(0.0, sigma, w)

    return window.with_fault(features, FaultSpec(kind=FaultKind.NOISE, r=r, w=w, seed=seed))


def inject_short(window: Window, f: float, w: int = FAULT_SEGMENT_LENGTH, seed: int = 0) -> Window:
    """Spike ``w`` distinct random temperature points: x -> x + f * x."""
    if f <= 0:
        raise ValueError("f must be positive")
    length = _check_segment(window, w)

    rng = make_rng(seed)
    idx = rng.choice(length, size=w, replace=False)
    features = window.features.copy()
    values = features[idx, TEMPERATURE]
    features[idx, TEMPERATURE] = values + f * values

    return window.with_fault(features, FaultSpec(kind=FaultKind.SHORT, f=f, w=w, seed=seed))


def inject_fixed(window: Window, G: float, w: int = FAULT_SEGMENT_LENGTH, seed: int = 0) -> Window:
    """Stick a contiguous run of ``w`` temperature values at ``G``."""
    length = _check_segment(window, w)

    rng = make_rng(seed)
    start = int(rng.integers(0, length - w + 1))
    features = window.features.copy()
    features[start:start + w, TEMPERATURE] = G

    return window.with_fault(features, FaultSpec(kind=FaultKind.FIXED, G=G, w=w, seed=seed))


def _transform_segment(
    segment: np.ndarray, spec: FaultSpec, rng: np.random.Generator, sigma: Optional[float]
) -> np.ndarray:
    if spec.kind == FaultKind.NOISE:
        return segment + rng.normal(0.0, sigma, segment.shape[0])
    if spec.kind == FaultKind.SHORT:
        return segment + spec.f * segment
    if spec.kind == FaultKind.FIXED:
        return np.full_like(segment, spec.G)
    raise ValueError(f"Cannot apply {spec.kind.value} to a segment")


def inject_mixed(
    window: Window, a: FaultSpec, b: FaultSpec, seed: int = 0,
    w: int = FAULT_SEGMENT_LENGTH, sigma_ref: Optional[float] = None
) -> Window:
    """
    Apply two single faults successively to one shared segment.

    A single contiguous segment of ``w`` points is drawn; ``a`` transforms
    every point of it, then ``b`` transforms the result. In this mode the
    short fault spikes all points of the segment rather than scattered ones.
    Noise std is ``r`` times ``sigma_ref`` when given, else ``r`` times the
    temperature std of the window before injection.
    """
    spec = FaultSpec.mixed(a, b, w).model_copy(update={"seed": seed})
    length = _check_segment(window, w)

    sigma = None
    if spec.involves_noise:
        noise = a if a.kind == FaultKind.NOISE else b
        sigma = _noise_sigma(window, noise.r, sigma_ref)

    rng = make_rng(seed)
    start = int(rng.integers(0, length - w + 1))
    features = window.features.copy()
    segment = features[start:start + w, TEMPERATURE]
    segment = _transform_segment(segment, a, rng, sigma)
    segment = _transform_segment(segment, b, rng, sigma)
    features[start:start + w, TEMPERATURE] = segment

    return window.with_fault(features, spec)


def apply_fault(window: Window, spec: FaultSpec, seed: int, sigma_ref: Optional[float] = None) -> Window:
    """Inject ``spec`` into ``window`` using the injector for its kind."""
    if spec.kind == FaultKind.NOISE:
        return inject_noise(window, spec.r, spec.w, seed, sigma_ref)
    if spec.kind == FaultKind.SHORT:
        return inject_short(window, spec.f, spec.w, seed)
    if spec.kind == FaultKind.FIXED:
        return inject_fixed(window, spec.G, spec.w, seed)
    a, b = spec.components
    return inject_mixed(window, a, b, seed, spec.w, sigma_ref)


def node_temperature_std(windows: Sequence[Window]) -> Dict[int, float]:
    """Per-node temperature std over all given windows"""
    by_node: Dict[int, List[np.ndarray]] = {}
    for window in windows:
        by_node.setdefault(window.node_id, []).append(window.temperature)
    return {node: float(np.std(np.concatenate(parts), ddof=1)) for node, parts in by_node.items()}


class LabeledCorpus(BaseModel):
    """Train/test split of windows, each carrying its own label"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: List[Window]
    test: List[Window]
    fault: FaultSpec
    abnormal_fraction: float
    split: float
    seed: int
    skipped_degenerate: int = Field(default=0, ge=0)

    @staticmethod
    def labels(windows: Sequence[Window]) -> np.ndarray:
        """1 for abnormal, 0 for normal"""
        return np.array([1 if w.is_abnormal else 0 for w in windows], dtype=np.int64)

    def balance(self) -> Dict[str, int]:
        """Class counts per split"""
        train_abn = int(self.labels(self.train).sum())
        test_abn = int(self.labels(self.test).sum())
        return {
            "train_abnormal": train_abn,
            "train_normal": len(self.train) - train_abn,
            "test_abnormal": test_abn,
            "test_normal": len(self.test) - test_abn,
        }


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _stratified_split(
    indices: np.ndarray, split: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    shuffled = rng.permutation(indices)
    n_train = min(max(_half_up(len(shuffled) * split), 1), len(shuffled) - 1)
    return shuffled[:n_train], shuffled[n_train:]


@trace_pipeline
def build_corpus(
    windows: Sequence[Window],
    spec: FaultSpec,
    abnormal_fraction: float = 0.5,
    split: float = 0.7,
    seed: int = 0,
    noise_reference: str = "window",
) -> LabeledCorpus:
    """
    Fault a seeded subset of windows and split the result into train/test.

    ``round(n * abnormal_fraction)`` windows (half up) receive the fault; the
    split is stratified so both classes land in both parts. Windows whose
    temperature is constant are never picked for faults involving noise.

    Raises:
        CorpusError: If too few windows exist for the fractions
    """
    if not 0 < abnormal_fraction < 1:
        raise ValueError("abnormal_fraction must be in (0, 1)")
    if not 0 < split < 1:
        raise ValueError("split must be in (0, 1)")
    if noise_reference not in NOISE_REFERENCES:
        raise ValueError(f"noise_reference must be one of {NOISE_REFERENCES}")

    n = len(windows)
    n_abnormal = _half_up(n * abnormal_fraction)
    if n_abnormal < 2 or n - n_abnormal < 2:
        raise CorpusError(
            f"{n} windows cannot provide both classes in both splits at "
            f"abnormal_fraction={abnormal_fraction}"
        )

    node_std = node_temperature_std(windows) if noise_reference == "node" else {}

    rng = make_rng(seed)
    order = rng.permutation(n)
    window_seeds = rng.integers(0, 2**63 - 1, size=n)

    labelled: List[Optional[Window]] = [None] * n
    abnormal_idx: List[int] = []
    skipped = 0
    for i in order:
        i = int(i)
        if len(abnormal_idx) == n_abnormal:
            break
        window = windows[i]
        try:
            labelled[i] = apply_fault(window, spec, int(window_seeds[i]), node_std.get(window.node_id))
        except DegenerateWindowError:
            skipped += 1
            continue
        abnormal_idx.append(i)

    if len(abnormal_idx) < n_abnormal:
        raise CorpusError(
            f"Only {len(abnormal_idx)} of {n_abnormal} windows could take a {spec.label} fault"
        )

    abnormal_set = set(abnormal_idx)
    normal_idx = np.array([i for i in range(n) if i not in abnormal_set], dtype=np.int64)
    for i in normal_idx:
        labelled[i] = windows[i]

    train_abn, test_abn = _stratified_split(np.array(sorted(abnormal_idx), dtype=np.int64), split, rng)
    train_norm, test_norm = _stratified_split(normal_idx, split, rng)
    train_idx = rng.permutation(np.concatenate([train_abn, train_norm]))
    test_idx = rng.permutation(np.concatenate([test_abn, test_norm]))

    if skipped:
        logger.warning(f"Skipped {skipped} constant-temperature windows for {spec.label} faults")

    corpus = LabeledCorpus(
        train=[labelled[i] for i in train_idx],
        test=[labelled[i] for i in test_idx],
        fault=spec,
        abnormal_fraction=abnormal_fraction,
        split=split,
        seed=seed,
        skipped_degenerate=skipped,
    )
    logger.info(f"Built {spec.label} corpus ({spec.intensity_label}): {corpus.balance()}")
    return corpus
