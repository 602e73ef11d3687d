"""Desk-scale synthetic experiments and analytic baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetSpec, make_windows, synth_generate
from .losses import ade
from .model import ModelConfig, SGNet
from .training import TrainConfig, evaluate, train


def constant_velocity_baseline(windows, d: int = 2) -> np.ndarray:
    """Least-squares constant-velocity fit to each observed track, extrapolated.

    Returns predictions ``(N, pred_len, d)`` in original coordinates.
    """
    out = []
    for w in windows:
        obs = w.denormalize(w.X[:, :d])
        n = len(obs)
        t = np.arange(n, dtype=np.float64)
        A = np.stack([np.ones(n), t], axis=1)
        coef, *_ = np.linalg.lstsq(A, obs, rcond=None)
        tf = np.arange(n, n + w.Y.shape[0], dtype=np.float64)
        out.append(coef[0] + tf[:, None] * coef[1])
    return np.asarray(out)


def synthetic_windows(kind: str, n: int, seed: int, noise: float, obs_len: int = 8, pred_len: int = 12,
                      goal_every: int = 6):
    """``n`` windows, one per synthetic track of exactly ``obs_len + pred_len`` frames."""
    spec = DatasetSpec(format="synthetic", obs_len=obs_len, pred_len=pred_len, motion_features=True)
    tracks = synth_generate(kind, n, seed, noise=noise, length=obs_len + pred_len, goal_every=goal_every)
    return make_windows(tracks, spec), spec


@dataclass
class RunOutcome:
    ablation: str
    seed: int
    test_ade: float
    test_fde: float
    train_log: list = field(default_factory=list)
    seconds: float = 0.0


def train_and_score(train_w, val_w, test_w, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    model_seed: int, k_eval: int | None = None) -> RunOutcome:
    import time

    t0 = time.perf_counter()
    model = SGNet(model_cfg, seed=model_seed)
    result = train(model, train_w, val_w, train_cfg)
    if result.best is not None:
        model.load_state_dict(result.best.params)
    report = evaluate(model, test_w, k=k_eval, seed=model_seed)
    h = model_cfg.pred_len
    return RunOutcome(model_cfg.ablation, model_seed, report[f"ade@{h}"], report[f"fde@{h}"],
                      result.log, time.perf_counter() - t0)


def baseline_ade(windows) -> float:
    pred = constant_velocity_baseline(windows)
    gt = np.stack([w.future() for w in windows])
    return float(ade(pred, gt).mean())
