"""Parameter containers, initialisation and the Adam update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return Tensor(values, requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


@dataclass
class LinearParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng, fan_in: int, fan_out: int, dtype=None) -> "LinearParams":
        return cls(glorot(rng, fan_in, fan_out, dtype), zeros_param(fan_out, dtype))

    def __call__(self, x) -> Tensor:
        return ag.linear(x, self.weight, self.bias)

    def named(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class GruParams:
    """Weights for one gated recurrent cell with input size D and hidden size H."""

    w_xz: Tensor
    w_xr: Tensor
    w_xh: Tensor
    w_hz: Tensor
    w_hr: Tensor
    w_hh: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, rng, input_size: int, hidden_size: int, dtype=None) -> "GruParams":
        D, H = input_size, hidden_size
        return cls(
            w_xz=glorot(rng, D, H, dtype),
            w_xr=glorot(rng, D, H, dtype),
            w_xh=glorot(rng, D, H, dtype),
            w_hz=glorot(rng, H, H, dtype),
            w_hr=glorot(rng, H, H, dtype),
            w_hh=glorot(rng, H, H, dtype),
            b_z=zeros_param(H, dtype),
            b_r=zeros_param(H, dtype),
            b_h=zeros_param(H, dtype),
        )

    @property
    def input_size(self) -> int:
        return self.w_xz.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.w_hz.shape[0]

    def __call__(self, x, h) -> Tensor:
        return ag.gru_cell(x, h, self)

    def named(self, prefix: str):
        for key in ("w_xz", "w_xr", "w_xh", "w_hz", "w_hr", "w_hh", "b_z", "b_r", "b_h"):
            yield f"{prefix}.{key}", getattr(self, key)


def gru_cell_reference(x, h, p: GruParams) -> Tensor:
    """The same cell built from primitive ops; used to cross-check the fused rule."""
    z = ag.sigmoid(ag.matmul(x, p.w_xz) + ag.matmul(h, p.w_hz) + p.b_z)
    r = ag.sigmoid(ag.matmul(x, p.w_xr) + ag.matmul(h, p.w_hr) + p.b_r)
    c = ag.tanh(ag.matmul(x, p.w_xh) + ag.matmul(r * h, p.w_hh) + p.b_h)
    return (1.0 - z) * h + z * c


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], state: AdamState, grads: dict[str, np.ndarray] | None = None) -> AdamState:
    """One bias-corrected Adam step, in place on ``params`` and ``state``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero.
    """
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ag.ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (state.beta1 * m + (1.0 - state.beta1) * g).astype(p.dtype)
        v = (state.beta2 * v + (1.0 - state.beta2) * g * g).astype(p.dtype)
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return state
