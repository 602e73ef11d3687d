"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .losses import sequence_loss
from .model import ModelConfig, SGNet

# Denominator floor: gradients smaller than this are compared in absolute terms.
GRAD_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(f: Callable[[], float], t: ag.Tensor, index, step: float = 1e-5) -> float:
    old = t.data[index]
    t.data[index] = old + step
    up = f()
    t.data[index] = old - step
    down = f()
    t.data[index] = old
    return (up - down) / (2 * step)


def check_function(f: Callable[[], ag.Tensor], inputs: list[ag.Tensor], step: float = 1e-5) -> float:
    """Worst relative error over every entry of ``inputs`` for scalar ``f``."""
    for t in inputs:
        t.grad = None
    loss = f()
    ag.backward(loss)
    worst = 0.0
    for t in inputs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        for index in np.ndindex(t.shape):
            n = numeric_grad(lambda: f().item(), t, index, step)
            worst = max(worst, relative_error(float(g[index]), n))
    return worst


TINY = dict(input_dim=6, output_dim=2, enc_hidden=8, dec_hidden=8, goal_hidden=4, latent_dim=2,
            obs_len=3, pred_len=3, k=2, embed_dim=4)


@dataclass
class BlockResult:
    name: str
    probes: int
    worst: float


@dataclass
class GradcheckReport:
    blocks: list[BlockResult] = field(default_factory=list)
    tolerance: float = 1e-4
    seconds: float = 0.0

    @property
    def probes(self) -> int:
        return sum(b.probes for b in self.blocks)

    @property
    def worst(self) -> float:
        return max((b.worst for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"{b.name:<28} probes={b.probes:<3d} worst_rel_err={b.worst:.3e} "
               f"{'ok' if b.worst <= self.tolerance else 'FAIL'}" for b in self.blocks]
        out.append(f"total probes={self.probes} worst={self.worst:.3e} tol={self.tolerance:g} "
                   f"{'PASS' if self.passed else 'FAIL'} ({self.seconds:.1f}s)")
        return out


def tiny_model(seed: int = 0, **overrides) -> SGNet:
    """Float64 tiny model with every parameter (biases included) randomised."""
    cfg = ModelConfig(**{**TINY, **overrides})
    model = SGNet(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for p in model.named_parameters().values():
        if p.ndim == 1:
            p.data = rng.uniform(-0.3, 0.3, size=p.shape)
    return model


def model_gradcheck(model: SGNet | None = None, probes: int = 120, seed: int = 0, batch: int = 2,
                    step: float = 1e-5, tolerance: float = 1e-4, train: bool = True) -> GradcheckReport:
    """Compare total-loss gradients with central differences on sampled parameters.

    Every parameter block receives at least one probe; the rest are spread in
    proportion to block size.
    """
    t0 = time.perf_counter()
    with ag.precision(np.float64):
        model = model or tiny_model(seed)
        c = model.config
        rng = np.random.default_rng(seed + 2)
        X = rng.normal(size=(batch, c.obs_len, c.input_dim))
        T = rng.normal(size=(batch, c.obs_len, c.pred_len, c.output_dim))
        noise = rng.standard_normal((c.obs_len, batch, c.k, c.latent_dim)) if c.mode == "stochastic" else None

        def loss():
            outs = model.forward(X, T, train=train, noise=noise)
            return sequence_loss(outs, T).total

        params = model.named_parameters()
        model.zero_grad()
        ag.backward(loss())
        total = sum(p.data.size for p in params.values())
        report = GradcheckReport(tolerance=tolerance)
        for name, p in params.items():
            n = min(p.data.size, max(1, round(probes * p.data.size / total)))
            flat = rng.choice(p.data.size, size=n, replace=False)
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            worst = 0.0
            for f in flat:
                index = np.unravel_index(int(f), p.shape)
                num = numeric_grad(lambda: loss().item(), p, index, step)
                worst = max(worst, relative_error(float(grad[index]), num))
            report.blocks.append(BlockResult(name, n, worst))
    report.seconds = time.perf_counter() - t0
    return report
