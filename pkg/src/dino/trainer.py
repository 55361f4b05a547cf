"""One-step teacher-forced training of the DINO operator."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, grad, mse, no_grad
from .autodiff.optim import AdamState, adam_step
from .diagnostics import relative_l2
from .field import Trajectory
from .model import DinoModel, forward_step, save_checkpoint
from .solver import config_hash

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "make_pairs",
    "split_train_val",
    "train",
    "evaluate_one_step",
    "write_report_csv",
]

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, step: int, checkpoint: Path | None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch: int = 16
    seed: int = 42
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    precision: str = "float32"
    max_steps: int | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    val_loss: float | None = None
    config_hash: str = ""
    steps: int = 0
    first_epoch: int = 1


def make_pairs(trajectories: Sequence[Trajectory], seed: int | None = None, epoch: int = 0) -> np.ndarray:
    """All consecutive ``(trajectory, k)`` index pairs, shuffled when ``seed`` is given.

    Row ``(i, k)`` stands for the pair ``(frames[k], frames[k + 1])`` of
    trajectory ``i``. Single-frame trajectories are skipped.
    """
    if len(trajectories) == 0:
        raise ValueError("no trajectories given")
    rows = []
    for i, traj in enumerate(trajectories):
        if len(traj) < 2:
            warnings.warn(f"trajectory {i} has a single frame and yields no pairs")
            continue
        rows.extend((i, k) for k in range(len(traj) - 1))
    pairs = np.array(rows, dtype=np.int64).reshape(-1, 2)
    if seed is not None:
        rng = np.random.default_rng([seed, epoch])
        pairs = pairs[rng.permutation(len(pairs))]
    return pairs


def split_train_val(trajectories: Sequence, val_fraction: float = 0.1):
    """Hold out the last ``val_fraction`` of trajectories (at least one if possible)."""
    n = len(trajectories)
    n_val = int(round(n * val_fraction))
    if n > 1:
        n_val = max(n_val, 1)
    n_val = min(n_val, n - 1) if n > 1 else 0
    return list(trajectories[: n - n_val]), list(trajectories[n - n_val :])


def _batch(trajectories, rows, dtype):
    u = np.stack([trajectories[i].frames[k] for i, k in rows]).astype(dtype)
    v = np.stack([trajectories[i].frames[k + 1] for i, k in rows]).astype(dtype)
    return Tensor(u), Tensor(v)


def _checkpoint(model: DinoModel, cfg: TrainConfig, tag: str, extra=None) -> Path | None:
    if not cfg.checkpoint_dir:
        return None
    d = Path(cfg.checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(model, d / f"{tag}.dinockpt", extra)


def one_step_loss(model: DinoModel, trajectories, batch: int = 64) -> float:
    """Mean squared one-step error over every pair, without gradients."""
    pairs = make_pairs(trajectories)
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(pairs), batch):
            rows = pairs[s : s + batch]
            u, v = _batch(trajectories, rows, model.dtype)
            total += mse(model(u), v).item() * len(rows)
            count += len(rows)
    return total / count


def train(
    model: DinoModel,
    data: Sequence[Trajectory],
    cfg: TrainConfig,
    val: Sequence[Trajectory] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
    checkpoint_extra: dict | None = None,
) -> tuple[DinoModel, TrainReport]:
    """Adam on the one-step MSE; resumes from ``model.step``/``model.optimizer_state``.

    Shuffling uses ``(cfg.seed, epoch)``, so runs are reproducible on one machine.
    """
    grid = model.config.grid.shape
    for t in data:
        if t.grid.shape != grid:
            raise ValueError(f"trajectory grid {t.grid.shape} does not match model grid {grid}")
    names = list(model.params)
    params = [model.params[n] for n in names]
    state = model.optimizer_state or AdamState()
    model.optimizer_state = state
    report = TrainReport(config_hash=config_hash({"model": model.config.to_dict(), "train": cfg.to_dict()}))
    start_epoch = int(model.metrics.get("epoch", 0))
    report.first_epoch = start_epoch + 1
    last_good = None
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        tic = time.perf_counter()
        pairs = make_pairs(data, cfg.seed, epoch)
        losses = []
        for s in range(0, len(pairs), cfg.batch):
            if cfg.max_steps is not None and report.steps >= cfg.max_steps:
                break
            u, v = _batch(data, pairs[s : s + cfg.batch], model.dtype)
            loss = mse(model(u), v)
            value = loss.item()
            if not math.isfinite(value):
                bad_step = model.step
                if last_good is not None:
                    step_good, arrays = last_good
                    for n in names:
                        model.params[n].data[...] = arrays[n]
                    model.step = step_good
                ckpt = _checkpoint(model, cfg, "last_good", checkpoint_extra)
                raise TrainingDiverged(
                    f"non-finite loss at optimizer step {bad_step}", bad_step, ckpt
                )
            if cfg.checkpoint_dir:
                last_good = (model.step, {n: model.params[n].data.copy() for n in names})
            grads = grad(loss, params)
            adam_step(model.params, dict(zip(names, grads)), state, cfg.lr)
            model.step += 1
            report.steps += 1
            losses.append(value)
        if not losses:
            break
        mean_loss = float(np.mean(losses))
        report.epoch_loss.append(mean_loss)
        report.epoch_seconds.append(time.perf_counter() - tic)
        model.metrics["epoch"] = epoch + 1
        model.metrics["train_loss"] = mean_loss
        log.info("epoch %d loss %.6e (%.1fs)", epoch + 1, mean_loss, report.epoch_seconds[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _checkpoint(model, cfg, f"epoch{epoch + 1:04d}", checkpoint_extra)
    if val:
        report.val_loss = one_step_loss(model, val)
        model.metrics["val_loss"] = report.val_loss
    return model, report


def evaluate_one_step(model: DinoModel, trajectories: Sequence[Trajectory]) -> float:
    """Mean over all pairs of ``relative_l2(G(u_k), u_{k+1})``."""
    errors = []
    for traj in trajectories:
        for k in range(len(traj) - 1):
            pred = forward_step(model, traj.frame(k))
            errors.append(relative_l2(pred, traj.frame(k + 1)))
    return float(np.mean(errors))


def write_report_csv(report: TrainReport, path, run_hash: str | None = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {run_hash or report.config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "seconds"])
        for i, (loss, sec) in enumerate(zip(report.epoch_loss, report.epoch_seconds), report.first_epoch):
            w.writerow([i, repr(loss), f"{sec:.3f}"])
    return path
