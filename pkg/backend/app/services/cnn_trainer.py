"""Mini-batch SGD training for the CNN presets"""

import logging
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from app.core.observability import trace_pipeline
from app.core.seeding import make_rng
from app.services.cnn_layers import NumericError
from app.services.cnn_model import (
    ModelConfig,
    ModelParams,
    Params,
    init_params,
    loss_and_backward,
    predict_batch,
)

logger = logging.getLogger(__name__)


class TrainingError(Exception):
    """Training diverged"""

    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        self.message = message
        super().__init__(f"epoch {epoch}: {message}")

    def __reduce__(self):
        return (self.__class__, (self.epoch, self.message))


class TrainConfig(BaseModel):
    """SGD hyperparameters. A learning rate of 0 freezes the parameters."""
    learning_rate: float = Field(default=0.01, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(default=32, ge=1)
    max_epochs: int = Field(default=50, ge=1)
    patience: int = Field(default=5, ge=1)
    seed: int = 0


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_da: float
    valid_da: float


class TrainingHistory(BaseModel):
    epochs: List[EpochRecord] = Field(default_factory=list)
    best_epoch: int = 0
    best_valid_da: float = 0.0
    stopped_early: bool = False


class TrainingResult(BaseModel):
    """Best-validation parameters and the per-epoch history"""
    params: ModelParams
    history: TrainingHistory


Dataset = Tuple[np.ndarray, np.ndarray]


def accuracy(config: ModelConfig, params: ModelParams, data: Dataset) -> float:
    inputs, labels = data
    return float(np.mean(predict_batch(config, params, inputs) == labels))


def sgd_step(params: ModelParams, grads: Params, velocity: Params, lr: float, momentum: float) -> None:
    """In-place momentum update: v = momentum * v - lr * g; p += v."""
    for name, grad in grads.items():
        velocity[name] *= momentum
        velocity[name] -= lr * grad
        params.tensors[name] += velocity[name]


@trace_pipeline
def train(
    config: ModelConfig,
    train_set: Dataset,
    valid_set: Dataset,
    tcfg: TrainConfig,
    init: Optional[ModelParams] = None,
) -> TrainingResult:
    """
    Train ``config`` with shuffled mini-batches and momentum SGD.

    Stops early when validation DA has not improved for ``patience`` epochs
    and returns the best-validation parameters.

    Raises:
        TrainingError: If the loss becomes non-finite
    """
    train_x, train_y = train_set
    if len(train_x) == 0 or len(valid_set[0]) == 0:
        raise ValueError("train and validation sets must be non-empty")

    params = init.copy() if init is not None else init_params(config, tcfg.seed)
    velocity = {name: np.zeros_like(v) for name, v in params.tensors.items()}
    rng = make_rng(tcfg.seed)

    history = TrainingHistory()
    best = params.copy()
    best_da = -1.0
    stale = 0

    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(len(train_x))
        losses = []
        weights = []
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            try:
                loss, grads = loss_and_backward(config, params, train_x[idx], train_y[idx])
            except NumericError as e:
                raise TrainingError(epoch, f"diverged ({e})") from e
            sgd_step(params, grads, velocity, tcfg.learning_rate, tcfg.momentum)
            losses.append(loss)
            weights.append(len(idx))

        try:
            train_da = accuracy(config, params, train_set)
            valid_da = accuracy(config, params, valid_set)
        except NumericError as e:
            raise TrainingError(epoch, f"diverged ({e})") from e

        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.average(losses, weights=weights)),
            train_da=train_da,
            valid_da=valid_da,
        )
        history.epochs.append(record)
        logger.info(
            f"{config.name} epoch {epoch}: loss={record.train_loss:.4f} "
            f"train_da={train_da:.4f} valid_da={valid_da:.4f}"
        )

        if valid_da > best_da:
            best_da = valid_da
            best = params.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                history.stopped_early = True
                logger.info(f"{config.name} early stop at epoch {epoch} (best {history.best_epoch})")
                break

    history.best_valid_da = best_da
    return TrainingResult(params=best, history=history)
