"""Optimisation loop, plateau schedule, evaluation and prediction drivers."""

from __future__ import annotations

import io
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from .data import ObservationWindow, batch_arrays
from .losses import MetricReport, score, sequence_loss
from .model import ConfigError, ModelConfig, SGNet, latent_noise
from .nn import AdamState, adam_update

log = logging.getLogger(__name__)

EPOCH_LOG_HEADER = "epoch,train_loss,val_loss,lr,seconds"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    lr: float = 5e-4
    plateau_factor: float = 0.2
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 0
    decode_last_only: bool = False
    # proposals drawn per window while training; 0 uses the model's k
    k: int = 0
    # stop after this many optimiser steps in total (0 = no limit)
    max_steps: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs: must be >= 0")
        if not self.lr > 0:
            raise ConfigError("train.lr: must be > 0")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("train.plateau_factor: must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ConfigError("train.plateau_patience: must be >= 1")
        if self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError("train.min_lr: must lie in [0, lr]")
        if self.k < 0 or self.max_steps < 0:
            raise ConfigError("train.k and train.max_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a ``threshold`` improvement."""

    factor: float = 0.2
    patience: int = 5
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float = float("inf")
    bad_epochs: int = 0

    def step(self, val_loss: float, lr: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            return max(self.min_lr, lr * self.factor)
        return lr

    def state(self) -> dict:
        return {"best": self.best if math.isfinite(self.best) else None, "bad_epochs": self.bad_epochs}

    def load(self, state: dict):
        self.best = float("inf") if state.get("best") is None else float(state["best"])
        self.bad_epochs = int(state.get("bad_epochs", 0))


@dataclass
class TrainResult:
    last: ckpt.Checkpoint
    best: ckpt.Checkpoint | None
    log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    # per-step loss components (bom_rmse, goal_rmse, kld, total)
    step_terms: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write(EPOCH_LOG_HEADER + "\n")
        for row in self.log:
            buf.write(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},{row['lr']!r},{row['seconds']:.3f}\n")
        return buf.getvalue()


def make_checkpoint(model: SGNet, adam: AdamState, epoch: int, best_val: float,
                    rng: np.random.Generator | None, sched: PlateauScheduler | None,
                    extra: dict | None = None) -> ckpt.Checkpoint:
    return ckpt.Checkpoint(
        model_config=model.config.to_dict(),
        params=model.state_dict(),
        epoch=epoch,
        best_val_loss=best_val,
        optimizer={"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        rng_state=rng.bit_generator.state if rng is not None else None,
        scheduler=sched.state() if sched is not None else {},
        extra=dict(extra or {}),
    )


def model_from_checkpoint(ck: ckpt.Checkpoint) -> SGNet:
    model = SGNet(ModelConfig.from_dict(ck.model_config), seed=0, dtype=np.float32)
    model.load_state_dict(ck.params)
    return model


def _batch_loss(model: SGNet, X, T, cfg: TrainConfig, noise_rng: np.random.Generator):
    c = model.config
    k = cfg.k or c.k
    noise = None
    if c.mode == "stochastic":
        steps = 1 if cfg.decode_last_only else c.obs_len
        noise = noise_rng.standard_normal((steps, X.shape[0], k, c.latent_dim))
    outs = model.forward(X, T, train=True, noise=noise, decode_last_only=cfg.decode_last_only, k=k)
    return sequence_loss(outs, T)


def dataset_loss(model: SGNet, windows: Sequence[ObservationWindow], cfg: TrainConfig, seed: int) -> float:
    """Training-objective value on a window set with a fixed noise stream."""
    rng = np.random.default_rng([seed, 104729])
    total, count = 0.0, 0
    for i in range(0, len(windows), cfg.batch_size):
        X, T = batch_arrays(windows[i : i + cfg.batch_size])
        loss = _batch_loss(model, X, T, cfg, rng)
        total += loss.total.item() * len(X)
        count += len(X)
    return total / count


def train(
    model: SGNet,
    train_windows: Sequence[ObservationWindow],
    val_windows: Sequence[ObservationWindow] | None,
    cfg: TrainConfig,
    *,
    resume: ckpt.Checkpoint | None = None,
    extra: dict | None = None,
    dump_dir: str | os.PathLike | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the total loss with per-epoch validation.

    Without a validation set the epoch's mean training loss drives the
    learning-rate schedule and best-checkpoint selection.
    """
    if not train_windows:
        raise TrainingError("training set is empty")
    X_all, T_all = batch_arrays(train_windows)
    if X_all.shape[2] != model.config.input_dim or T_all.shape[-1] != model.config.output_dim:
        raise ConfigError(
            f"data has input width {X_all.shape[2]} and output width {T_all.shape[-1]}; model expects "
            f"{model.config.input_dim} and {model.config.output_dim}")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    sched = PlateauScheduler(cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold, cfg.min_lr)
    start_epoch = 0
    best_val = float("inf")
    if resume is not None:
        model.load_state_dict(resume.params)
        o = resume.optimizer
        adam = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                         m={k: v.copy() for k, v in resume.adam_m.items()},
                         v={k: v.copy() for k, v in resume.adam_v.items()})
        rng.bit_generator.state = resume.rng_state
        sched.load(resume.scheduler)
        start_epoch = resume.epoch
        best_val = resume.best_val_loss
    params = model.named_parameters()
    n = len(train_windows)
    result = TrainResult(last=None, best=None)  # type: ignore[arg-type]
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        lr_used = adam.lr
        total, count = 0.0, 0
        for b in range(0, n, cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            try:
                loss = _batch_loss(model, X_all[idx], T_all[idx], cfg, rng)
                value = loss.total.item()
                if not math.isfinite(value):
                    raise ag.NumericError(f"loss is {value}")
                model.zero_grad()
                ag.backward(loss.total)
            except ag.NumericError as exc:
                _dump_batch(dump_dir, epoch, idx, X_all[idx], T_all[idx])
                raise TrainingError(f"non-finite values at epoch {epoch}, windows {idx.tolist()}: {exc}") from exc
            adam_update(params, adam)
            result.step_losses.append(value)
            result.step_terms.append(loss.values())
            total += value * len(idx)
            count += len(idx)
            if cfg.max_steps and adam.step >= cfg.max_steps:
                break
        train_loss = total / count
        val_loss = dataset_loss(model, val_windows, cfg, cfg.seed) if val_windows else train_loss
        adam.lr = sched.step(val_loss, adam.lr)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr_used,
               "seconds": time.perf_counter() - t0}
        result.log.append(row)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, lr_used)
        if val_loss < best_val:
            best_val = val_loss
            result.best = make_checkpoint(model, adam, epoch, best_val, rng, sched, extra)
        if on_epoch:
            on_epoch(row)
        if cfg.max_steps and adam.step >= cfg.max_steps:
            break
    last_epoch = result.log[-1]["epoch"] if result.log else start_epoch
    result.last = make_checkpoint(model, adam, last_epoch, best_val, rng, sched, extra)
    return result


def _dump_batch(dump_dir, epoch, idx, X, T):
    if dump_dir is None:
        return
    path = Path(dump_dir) / f"nonfinite_epoch{epoch}.npz"
    np.savez(path, indices=idx, observed=X, targets=T)
    log.error("offending batch written to %s", path)


# ----------------------------------------------------------------------------
# inference


def worker_count(requested: int | None = None) -> int:
    cap = int(os.environ.get("SGNET_THREADS", "0") or 0)
    n = requested or os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


def predict(model: SGNet, windows: Sequence[ObservationWindow], k: int | None = None, seed: int = 0,
            workers: int = 1, chunk: int = 256) -> np.ndarray:
    """Final-step proposals in original coordinates: ``(N, K, pred_len, d)``.

    Each window draws latent noise from its own stream, so results do not
    depend on chunking or worker count.
    """
    c = model.config
    if c.mode == "deterministic":
        k = 1
    k = k or c.k
    if windows and windows[0].X.shape[1] != c.input_dim:
        raise ConfigError(f"windows have input width {windows[0].X.shape[1]}, model expects {c.input_dim}")

    def run(lo: int) -> np.ndarray:
        part = windows[lo : lo + chunk]
        X = np.stack([w.X for w in part])
        noise = None
        if c.mode == "stochastic":
            noise = np.stack([latent_noise(seed, lo + i, k, c.latent_dim)[0] for i in range(len(part))])[None]
        out = model.forward(X, train=False, noise=noise, decode_last_only=True, k=k)[-1]
        traj = out.trajectories.data.astype(np.float64)
        return np.stack([w.denormalize(traj[i]) for i, w in enumerate(part)])

    starts = list(range(0, len(windows), chunk))
    if not starts:
        return np.zeros((0, k, c.pred_len, c.output_dim))
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def evaluate(model: SGNet, windows: Sequence[ObservationWindow], k: int | None = None,
             horizons: Sequence[int] | None = None, seed: int = 0, workers: int = 1) -> MetricReport:
    """Best-of-K metrics on final-encoder-step predictions."""
    if not windows:
        raise ValueError("evaluation set is empty")
    preds = predict(model, windows, k, seed, workers)
    gt = np.stack([w.future() for w in windows])
    return score(preds, gt, list(horizons or [model.config.pred_len]))
