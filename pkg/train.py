# train.py
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import autograd as ag
from autograd import Tape, Tensor
from dataset import DrrSample
from formats.checkpoint_file import save_checkpoint
from model import ForecastModel, init_glorot
from tumor_shared import (
    ContractError, ModelConfig, NumericError, ParameterError, ShapeError, TrainConfig, append_csv_row, emit,
)

HISTORY_HEADER = ["epoch", "mean_loss", "lr"]


# --- Loss ---
def rmse_loss(pred: Tensor, target) -> Tensor:
    """sqrt(mean over xyz of squared error) per time point, averaged over T_pred then batch."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != t.shape or pred.shape[-1] != 3:
        raise ShapeError("rmse_loss: prediction and target differ", pred.shape, t.shape)
    per_point = ag.sqrt(ag.mean(ag.square(pred - t), axis=-1))
    return ag.mean(per_point)


# --- Schedule ---
def lr_at(epoch: float, config: TrainConfig = TrainConfig()) -> float:
    """Linear warmup lr_min -> lr_max, then cosine back to lr_min at the last epoch."""
    if not 0.0 <= epoch <= config.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {config.epochs}]")
    w = config.warmup_epochs
    if epoch <= w and w > 0:
        frac = epoch / w
    else:
        frac = 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (config.epochs - w)))
    return (1.0 - frac) * config.lr_min + frac * config.lr_max


# --- Optimizer ---
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam, updating parameter data in place."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has the wrong shape", g.shape, p.shape)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


# --- Loop ---
@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


def stack_batch(samples: Sequence[DrrSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    frames = np.stack([s.frames for s in samples])
    observed = np.stack([s.observed_positions for s in samples])
    targets = np.stack([s.targets for s in samples])
    return frames, observed, targets


def _check_window(model: ForecastModel, sample: DrrSample):
    c = model.config
    if sample.frames.shape != (c.T_obs, c.image_size, c.image_size) or sample.targets.shape != (c.T_pred, 3):
        raise ContractError(f"dataset windows {sample.frames.shape}/{sample.targets.shape} do not match "
                            f"model T_obs={c.T_obs}, T_pred={c.T_pred}, image_size={c.image_size}")


def train(model: ForecastModel, dataset, config: TrainConfig, run_dir: Optional[str] = None,
          verbose: bool = True) -> Tuple[ForecastModel, List[EpochRecord]]:
    """Teacher-forced training; `dataset` is a SessionDataset, TrainingPool or list of samples."""
    config.validate_schedule()
    samples = list(getattr(dataset, "samples", dataset))
    if not samples:
        raise ParameterError("cannot train on an empty dataset")
    _check_window(model, samples[0])
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    history_path = None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        history_path = os.path.join(run_dir, "history.csv")
        if os.path.exists(history_path):
            os.remove(history_path)

    params = model.params
    state = AdamState()
    history: List[EpochRecord] = []
    best = math.inf
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            frames, observed, targets = stack_batch([samples[i] for i in idx])
            rng = np.random.default_rng([config.seed, step])
            with Tape() as tape:
                pred = model.forward_teacher_forced(frames, observed, targets, training=True, rng=rng)
                loss = rmse_loss(pred, targets)
                tape.backward(loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            lr = lr_at(epoch + b / steps_per_epoch, config)
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr,
                      config.beta1, config.beta2, config.eps)
            model.zero_grad()
            total += value * len(idx)
            step += 1
        record = EpochRecord(epoch=epoch + 1, mean_loss=total / n, lr=lr_at(epoch, config))
        history.append(record)
        if verbose:
            print(f"[TRAIN] epoch {record.epoch}/{config.epochs} loss={record.mean_loss:.6f} lr={record.lr:.3e}")
        emit("train_epoch", {"epoch": record.epoch, "mean_loss": record.mean_loss, "lr": record.lr})
        if history_path:
            append_csv_row(history_path, HISTORY_HEADER, [record.epoch, repr(record.mean_loss), repr(record.lr)])
            if record.mean_loss < best:
                best = record.mean_loss
                save_checkpoint(model, os.path.join(run_dir, "best.tmck"))
    if run_dir:
        save_checkpoint(model, os.path.join(run_dir, "last.tmck"))
    return model, history


def gradient_audit(config: Optional[ModelConfig] = None, seed: int = 0, batch: int = 2,
                   eps: float = 1e-5) -> float:
    """Gradcheck of the teacher-forced RMSE loss over every parameter, in float64."""
    config = (config or ModelConfig.tiny()).model_copy(update={"dropout": 0.0})
    model = init_glorot(config, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    frames = rng.random((batch, config.T_obs, config.image_size, config.image_size))
    observed = rng.normal(size=(batch, config.T_obs, 3))
    targets = rng.normal(size=(batch, config.T_pred, 3))

    def loss_fn(*_):
        pred = model.forward_teacher_forced(frames, observed, targets, training=False)
        return rmse_loss(pred, targets)

    return ag.gradcheck(loss_fn, model.parameters(), eps)
