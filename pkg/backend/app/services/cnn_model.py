"""
CNN classifiers M1/M2/M3: conv-pool-conv-pool-dense-output.

Layer order: C1 conv(8 kernels 3x3)+ReLU -> S1 maxpool -> C2 conv(16 kernels
3x3 or 5x5)+ReLU -> S2 maxpool -> flatten -> F1 dense(64|128)+ReLU -> output
dense(2) -> softmax. Output index 0 is normal, index 1 abnormal.
"""

import json
import zipfile
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.seeding import make_rng
from app.services.cnn_layers import (
    NumericError,
    check_finite,
    conv2d_same,
    conv2d_same_backward,
    dense,
    dense_backward,
    log_softmax,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    softmax,
)
from app.services.gray_encoder import IMAGE_SIZE, GrayImage
from app.services.sensor_ingest import Label

logger = logging.getLogger(__name__)

MODEL_FORMAT = "sensorlens-cnn"
MODEL_FORMAT_VERSION = 1

PARAM_NAMES = ("c1_w", "c1_b", "c2_w", "c2_b", "f1_w", "f1_b", "out_w", "out_b")

Params = Dict[str, np.ndarray]


class ModelFormatError(Exception):
    """Model file cannot be read or is malformed"""
    pass


class ModelVersionError(ModelFormatError):
    """Model file does not match the expected format version or preset"""
    pass


class ModelConfig(BaseModel):
    """Architecture of one of the three presets"""
    model_config = ConfigDict(frozen=True)

    name: str
    c1_kernels: int = 8
    c1_size: int = 3
    c2_kernels: int = 16
    c2_size: int
    f1_width: int
    outputs: int = 2
    input_size: int = IMAGE_SIZE

    @model_validator(mode="after")
    def _check_preset(self) -> "ModelConfig":
        preset = _PRESET_FIELDS.get(self.name)
        if preset is None or (self.c2_size, self.f1_width) != preset:
            raise ValueError(f"{self.name} is not one of the presets {sorted(_PRESET_FIELDS)}")
        return self

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        if name not in _PRESET_FIELDS:
            raise ValueError(f"Unknown model preset {name!r}; choose from {sorted(_PRESET_FIELDS)}")
        c2_size, f1_width = _PRESET_FIELDS[name]
        return cls(name=name, c2_size=c2_size, f1_width=f1_width)

    @property
    def flat_size(self) -> int:
        """Width of the flattened S2 map"""
        side = self.input_size // 4
        return side * side * self.c2_kernels

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            "c1_w": (self.c1_size, self.c1_size, 1, self.c1_kernels),
            "c1_b": (self.c1_kernels,),
            "c2_w": (self.c2_size, self.c2_size, self.c1_kernels, self.c2_kernels),
            "c2_b": (self.c2_kernels,),
            "f1_w": (self.flat_size, self.f1_width),
            "f1_b": (self.f1_width,),
            "out_w": (self.f1_width, self.outputs),
            "out_b": (self.outputs,),
        }


# name -> (C2 kernel size, F1 width)
_PRESET_FIELDS = {"M1": (3, 64), "M2": (5, 64), "M3": (5, 128)}
MODEL_PRESETS = tuple(_PRESET_FIELDS)


def param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape in config.param_shapes().values()))


class ModelParams(BaseModel):
    """Learned weights of one model plus the seed they were initialised from"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    preset: str
    seed: int
    tensors: Params = Field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(
            preset=self.preset, seed=self.seed,
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )

    def check_against(self, config: ModelConfig) -> None:
        expected = config.param_shapes()
        if self.preset != config.name:
            raise ModelVersionError(f"Parameters belong to {self.preset}, not {config.name}")
        for name, shape in expected.items():
            if name not in self.tensors or self.tensors[name].shape != shape:
                raise ModelFormatError(f"Parameter {name} missing or not shaped {shape}")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Zero biases; weights uniform in +-sqrt(6 / fan_in)."""
    rng = make_rng(seed)
    tensors: Params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
            continue
        fan_in = int(np.prod(shape[:-1]))
        limit = np.sqrt(6.0 / fan_in)
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(preset=config.name, seed=seed, tensors=tensors)


def _as_input_batch(images: Union[GrayImage, np.ndarray]) -> np.ndarray:
    if isinstance(images, GrayImage):
        return images.as_input()[np.newaxis]
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[np.newaxis, :, :, np.newaxis]
    elif x.ndim == 3:
        x = x[np.newaxis]
    return x


def forward_batch(config: ModelConfig, params: ModelParams, x: np.ndarray) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Run the network on a (N, 16, 16, 1) batch of [0, 1] inputs.

    Returns:
        (probabilities (N, 2), cache of every intermediate activation)

    Raises:
        NumericError: If any layer produces non-finite values
    """
    cache: Dict[str, Any] = {"input": x}

    cache["c1_pre"] = check_finite(conv2d_same(x, params["c1_w"], params["c1_b"]), "C1")
    cache["c1"] = relu(cache["c1_pre"])
    cache["s1"], cache["s1_arg"] = maxpool2(cache["c1"])

    cache["c2_pre"] = check_finite(conv2d_same(cache["s1"], params["c2_w"], params["c2_b"]), "C2")
    cache["c2"] = relu(cache["c2_pre"])
    cache["s2"], cache["s2_arg"] = maxpool2(cache["c2"])

    cache["flat"] = cache["s2"].reshape(x.shape[0], -1)
    cache["f1_pre"] = check_finite(dense(cache["flat"], params["f1_w"], params["f1_b"]), "F1")
    cache["f1"] = relu(cache["f1_pre"])

    cache["logits"] = check_finite(dense(cache["f1"], params["out_w"], params["out_b"]), "output")
    probs = softmax(cache["logits"])
    return probs, cache


def layer_shapes(config: ModelConfig, params: ModelParams) -> Dict[str, Tuple[int, ...]]:
    """Per-sample shapes of the intermediate activations for a blank input"""
    x = np.zeros((1, config.input_size, config.input_size, 1))
    _, cache = forward_batch(config, params, x)
    return {name: cache[name].shape[1:] for name in ("c1", "s1", "c2", "s2", "flat", "f1", "logits")}


def forward(config: ModelConfig, params: ModelParams, image: Union[GrayImage, np.ndarray]) -> np.ndarray:
    """Class probabilities [p_normal, p_abnormal] for a single image."""
    probs, _ = forward_batch(config, params, _as_input_batch(image))
    return probs[0]


def loss_and_backward(
    config: ModelConfig, params: ModelParams, inputs: np.ndarray, labels: np.ndarray
) -> Tuple[float, Params]:
    """
    Mean cross-entropy of a batch and its gradient for every parameter.

    Args:
        inputs: (N, 16, 16, 1) batch
        labels: (N,) class indices, 1 = abnormal

    Raises:
        NumericError: If the loss is not finite
    """
    if len(inputs) == 0:
        raise ValueError("batch must not be empty")
    labels = np.asarray(labels, dtype=np.int64)
    n = inputs.shape[0]

    probs, cache = forward_batch(config, params, inputs)
    log_probs = log_softmax(cache["logits"])
    loss = float(-log_probs[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise NumericError("loss")

    grad_logits = probs.copy()
    grad_logits[np.arange(n), labels] -= 1.0
    grad_logits /= n

    grads: Params = {}
    grad_f1, grads["out_w"], grads["out_b"] = dense_backward(cache["f1"], params["out_w"], grad_logits)
    grad_f1_pre = relu_backward(cache["f1_pre"], grad_f1)
    grad_flat, grads["f1_w"], grads["f1_b"] = dense_backward(cache["flat"], params["f1_w"], grad_f1_pre)

    grad_s2 = grad_flat.reshape(cache["s2"].shape)
    grad_c2 = maxpool2_backward(grad_s2, cache["s2_arg"])
    grad_c2_pre = relu_backward(cache["c2_pre"], grad_c2)
    grad_s1, grads["c2_w"], grads["c2_b"] = conv2d_same_backward(cache["s1"], params["c2_w"], grad_c2_pre)

    grad_c1 = maxpool2_backward(grad_s1, cache["s1_arg"])
    grad_c1_pre = relu_backward(cache["c1_pre"], grad_c1)
    _, grads["c1_w"], grads["c1_b"] = conv2d_same_backward(inputs, params["c1_w"], grad_c1_pre)

    return loss, grads


def decide(probs: np.ndarray) -> np.ndarray:
    """Argmax over [normal, abnormal]; an exact tie resolves to abnormal (1)."""
    probs = np.atleast_2d(probs)
    return (probs[:, 1] >= probs[:, 0]).astype(np.int64)


def predict(config: ModelConfig, params: ModelParams, image: Union[GrayImage, np.ndarray]) -> Label:
    return Label.ABNORMAL if decide(forward(config, params, image))[0] == 1 else Label.NORMAL


def predict_batch(
    config: ModelConfig, params: ModelParams, inputs: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Class indices for a (N, 16, 16, 1) batch"""
    out = []
    for start in range(0, inputs.shape[0], batch_size):
        probs, _ = forward_batch(config, params, inputs[start:start + batch_size])
        out.append(decide(probs))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def save_model(
    path: Path, config: ModelConfig, params: ModelParams, extra: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write a self-describing ``.npz``: a JSON header (format, version, preset,
    seed, shapes, caller metadata) plus every parameter array.
    """
    params.check_against(config)
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "preset": config.name,
        "seed": params.seed,
        "shapes": {k: list(v) for k, v in config.param_shapes().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param__{name}": params[name] for name in PARAM_NAMES}
    with open(path, "wb") as f:
        np.savez(f, header=np.array(json.dumps(header)), **arrays)
    logger.info(f"Saved {config.name} model to {path}")
    return path


def load_model(path: Path, expected_preset: Optional[str] = None) -> Tuple[ModelConfig, ModelParams, Dict[str, Any]]:
    """
    Read a model written by save_model.

    Raises:
        ModelFormatError: If the file is unreadable or malformed
        ModelVersionError: If the format version or preset does not match
    """
    try:
        with np.load(Path(path), allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            tensors = {name: data[f"param__{name}"].copy() for name in PARAM_NAMES}
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise ModelFormatError(f"Cannot read model file {path}: {e}") from e

    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_FORMAT_VERSION:
        raise ModelVersionError(
            f"{path} has format {header.get('format')} v{header.get('version')}, "
            f"expected {MODEL_FORMAT} v{MODEL_FORMAT_VERSION}"
        )
    preset = header["preset"]
    if expected_preset is not None and preset != expected_preset:
        raise ModelVersionError(f"{path} holds a {preset} model, config asks for {expected_preset}")

    config = ModelConfig.preset(preset)
    params = ModelParams(preset=preset, seed=int(header["seed"]), tensors=tensors)
    params.check_against(config)
    return config, params, header.get("extra", {})
