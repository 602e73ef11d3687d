"""Training losses on tensors and evaluation metrics on plain arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import NumericError, ShapeError, Tensor
from .model import LatentGaussian

# ----------------------------------------------------------------------------
# losses


def rmse_traj(pred, gt) -> Tensor:
    """Root of the mean squared residual over the last two axes (steps, coords)."""
    pred = ag.as_tensor(pred)
    gt = ag.as_tensor(gt, pred.dtype)
    if pred.shape[-2:] != gt.shape[-2:] or pred.ndim < 2:
        raise ShapeError(f"rmse_traj: {pred.shape} vs {gt.shape}")
    sq = ag.square(pred - gt)
    return ag.sqrt(ag.mean(sq, axis=(-2, -1)))


def bom_loss(preds, gt) -> tuple[Tensor, np.ndarray]:
    """Best-of-many RMSE.

    ``preds`` is ``(..., K, L, d)`` and ``gt`` ``(..., L, d)``. Returns the
    per-sample minimum over K and the winning index (lowest index on ties).
    """
    preds = ag.as_tensor(preds)
    gt = ag.as_tensor(gt, preds.dtype)
    if preds.ndim < 3 or preds.shape[-2:] != gt.shape[-2:] or preds.shape[:-3] != gt.shape[:-2]:
        raise ShapeError(f"bom_loss: predictions {preds.shape} vs ground truth {gt.shape}")
    k = preds.shape[-3]
    gt_b = ag.reshape(gt, gt.shape[:-2] + (1,) + gt.shape[-2:])
    per = rmse_traj(preds, gt_b)  # (..., K)
    idx = np.argmin(per.data, axis=-1)
    if per.ndim == 1:
        return per[int(idx)], np.asarray(idx)
    flat = per.reshape(-1, k)
    rows = np.arange(flat.shape[0])
    best = flat[rows, idx.reshape(-1)]
    return best.reshape(per.shape[:-1]), idx


def kld_gaussian(q: LatentGaussian, p: LatentGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if not (np.isfinite(q.logvar.data).all() and np.isfinite(p.logvar.data).all()):
        raise NumericError("non-finite log-variance")
    diff = q.mu - p.mu
    inv_var_p = ag.exp(p.logvar * -1.0)
    terms = p.logvar - q.logvar + (ag.exp(q.logvar) + ag.square(diff)) * inv_var_p - 1.0
    return ag.sum(terms, axis=-1) * 0.5


@dataclass
class LossBreakdown:
    bom_rmse: Tensor
    goal_rmse: Tensor
    kld: Tensor | None
    total: Tensor

    def values(self) -> dict[str, float]:
        out = {"bom_rmse": self.bom_rmse.item(), "goal_rmse": self.goal_rmse.item(),
               "total": self.total.item()}
        if self.kld is not None:
            out["kld"] = self.kld.item()
        return out


def total_loss(preds, goal_positions, gt, q: LatentGaussian | None = None,
               p: LatentGaussian | None = None) -> LossBreakdown:
    """Batch-mean of best-of-many RMSE + goal RMSE (+ KL when a posterior is given)."""
    bom, _ = bom_loss(preds, gt)
    goal = rmse_traj(goal_positions, gt)
    bom_m = ag.mean(bom)
    goal_m = ag.mean(goal)
    total = bom_m + goal_m
    kld_m = None
    if q is not None:
        kld_m = ag.mean(kld_gaussian(q, p))
        total = total + kld_m
    return LossBreakdown(bom_m, goal_m, kld_m, total)


def sequence_loss(outputs, targets) -> LossBreakdown:
    """Average :func:`total_loss` over every decoded encoder step.

    ``targets`` is ``(B, obs_len, pred_len, d)``.
    """
    parts = [total_loss(o.trajectories, o.goal_positions, targets[:, o.step], o.posterior, o.prior)
             for o in outputs if o.trajectories is not None]
    n = float(len(parts))

    def avg(items):
        acc = items[0]
        for it in items[1:]:
            acc = acc + it
        return acc * (1.0 / n)

    kld = avg([x.kld for x in parts]) if parts[0].kld is not None else None
    return LossBreakdown(avg([x.bom_rmse for x in parts]), avg([x.goal_rmse for x in parts]),
                         kld, avg([x.total for x in parts]))


# ----------------------------------------------------------------------------
# metrics (plain float64 arrays, last two axes = steps x coords)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if pred.ndim < 2 or pred.shape[-2] == 0:
        raise ShapeError("empty trajectory")
    return pred, gt


def ade(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def fde(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    return np.linalg.norm(pred[..., -1, :] - gt[..., -1, :], axis=-1)


def _horizon(arr, horizon):
    if horizon is None:
        return arr
    if not 1 <= horizon <= arr.shape[-2]:
        raise ValueError(f"horizon {horizon} outside 1..{arr.shape[-2]}")
    return arr[..., :horizon, :]


def centroids(boxes) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack([(boxes[..., 0] + boxes[..., 2]) / 2, (boxes[..., 1] + boxes[..., 3]) / 2], axis=-1)


def mse_bbox(pred, gt, horizon=None) -> np.ndarray:
    """Mean squared error over the four stored corner coordinates."""
    pred, gt = _check(pred, gt)
    pred, gt = _horizon(pred, horizon), _horizon(gt, horizon)
    return ((pred - gt) ** 2).mean(axis=(-2, -1))


def c_mse(pred, gt, horizon=None) -> np.ndarray:
    pred, gt = _check(pred, gt)
    pc, gc = centroids(_horizon(pred, horizon)), centroids(_horizon(gt, horizon))
    return ((pc - gc) ** 2).mean(axis=(-2, -1))


def cf_mse(pred, gt, horizon=None) -> np.ndarray:
    pred, gt = _check(pred, gt)
    pc, gc = centroids(_horizon(pred, horizon)), centroids(_horizon(gt, horizon))
    return ((pc[..., -1, :] - gc[..., -1, :]) ** 2).mean(axis=-1)


def fiou(pred_box, gt_box) -> np.ndarray:
    """Intersection over union of ``(x1, y1, x2, y2)`` boxes; 0 for an empty union."""
    a = np.asarray(pred_box, dtype=np.float64)
    b = np.asarray(gt_box, dtype=np.float64)
    for box in (a, b):
        if np.any(box[..., 2] < box[..., 0]) or np.any(box[..., 3] < box[..., 1]):
            raise ValueError("boxes must have non-negative width and height")
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = ((a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
             + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


# ----------------------------------------------------------------------------
# reports

# metric name -> True when higher is better
_DIRECTION = {"ade": False, "fde": False, "mse": False, "c_mse": False, "cf_mse": False, "fiou": True}


def per_proposal_metrics(preds, gt, horizon: int) -> dict[str, np.ndarray]:
    """Every metric for every window and proposal: arrays of shape ``(N, K)``.

    ``preds`` is ``(N, K, L, d)``, ``gt`` ``(N, L, d)``. Centroid data (d=2)
    gets ADE/FDE; box data (d=4) gets ADE/FDE on box centroids plus the box
    metrics.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)[:, None]
    gt = np.broadcast_to(gt, preds.shape)
    p_h, g_h = _horizon(preds, horizon), _horizon(gt, horizon)
    d = preds.shape[-1]
    pc, gc = (centroids(p_h), centroids(g_h)) if d == 4 else (p_h, g_h)
    out = {"ade": ade(pc, gc), "fde": fde(pc, gc)}
    if d == 4:
        out["mse"] = mse_bbox(p_h, g_h)
        out["c_mse"] = c_mse(p_h, g_h)
        out["cf_mse"] = cf_mse(p_h, g_h)
        out["fiou"] = fiou(p_h[..., -1, :], g_h[..., -1, :])
    return out


def best_of_k(values: np.ndarray, higher_is_better: bool = False) -> np.ndarray:
    """Per-window best over proposals (axis 1)."""
    return values.max(axis=1) if higher_is_better else values.min(axis=1)


@dataclass
class MetricReport:
    """Metric means keyed by ``name@horizon``."""

    values: dict[str, float] = field(default_factory=dict)
    windows: int = 0
    k: int = 1

    def __getitem__(self, key):
        return self.values[key]

    def to_csv(self) -> str:
        keys = list(self.values)
        header = ",".join(["windows", "k"] + keys)
        row = ",".join([str(self.windows), str(self.k)] + [repr(float(self.values[k])) for k in keys])
        note = "# mse averages the 4 stored box coordinates (x1,y1,x2,y2)\n" if any(k.startswith("mse@") for k in keys) else ""
        return note + header + "\n" + row + "\n"

    def to_json(self) -> str:
        return json.dumps({"windows": self.windows, "k": self.k, "metrics": self.values},
                          indent=2, sort_keys=False) + "\n"


def score(preds, gt, horizons) -> MetricReport:
    """Best-of-K per window and metric, then the mean over windows."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.shape[0] == 0:
        raise ValueError("cannot score an empty prediction set")
    report = MetricReport(windows=preds.shape[0], k=preds.shape[1])
    for h in horizons:
        for name, vals in per_proposal_metrics(preds, gt, h).items():
            report.values[f"{name}@{h}"] = float(best_of_k(vals, _DIRECTION[name]).mean())
    return report
