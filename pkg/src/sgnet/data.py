"""Track loading, windowing, normalisation, splits and synthetic generators."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("bev-text", "bbox-csv", "synthetic")
COORD_KINDS = ("offset", "pixel")
SYNTH_KINDS = ("constant-velocity", "piecewise-goal", "circular")


class ParseError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class AgentTrack:
    agent_id: str
    scene_id: str
    frames: np.ndarray  # (n,) int, constant stride
    states: np.ndarray  # (n, d): (x, y) or (x1, y1, x2, y2)
    aux: np.ndarray | None = None  # (n, a)
    fps: float = 2.5
    features: np.ndarray | None = None  # derived velocity/acceleration, (n, 2d)

    def __len__(self):
        return len(self.frames)

    @property
    def centroids(self) -> np.ndarray:
        s = self.states
        if s.shape[1] == 4:
            return np.stack([(s[:, 0] + s[:, 2]) / 2, (s[:, 1] + s[:, 3]) / 2], axis=1)
        return s

    @property
    def width_height(self) -> np.ndarray | None:
        s = self.states
        if s.shape[1] != 4:
            return None
        return np.stack([s[:, 2] - s[:, 0], s[:, 3] - s[:, 1]], axis=1)


@dataclass
class DatasetSpec:
    format: str = "bev-text"
    fps: float = 2.5
    # frames between consecutive annotations; 0 infers it per file
    stride: int = 0
    obs_len: int = 8
    pred_len: int = 12
    overlap: float = 0.5
    coord_kind: str = "offset"
    min_track_seconds: float = 0.0
    motion_features: bool = True
    frame_width: float = 1920.0
    frame_height: float = 1080.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.format not in FORMATS:
            raise ValueError(f"data.format: expected one of {FORMATS}, got {self.format!r}")
        if self.coord_kind not in COORD_KINDS:
            raise ValueError(f"data.coord_kind: expected one of {COORD_KINDS}, got {self.coord_kind!r}")
        if self.obs_len < 1 or self.pred_len < 1:
            raise ValueError("data.obs_len and data.pred_len must be >= 1")
        if not 0 <= self.overlap < 1:
            raise ValueError("data.overlap: must lie in [0, 1)")
        if self.fps <= 0:
            raise ValueError("data.fps: must be positive")
        if self.stride < 0:
            raise ValueError("data.stride: must be >= 0")

    @property
    def window_len(self) -> int:
        return self.obs_len + self.pred_len

    @property
    def window_stride(self) -> int:
        step = Fraction(1) - Fraction(str(self.overlap))
        return max(1, math.ceil(step * self.window_len))

    @property
    def min_track_len(self) -> int:
        return max(self.window_len, math.ceil(self.min_track_seconds * self.fps - 1e-9))


@dataclass
class ObservationWindow:
    X: np.ndarray  # (obs_len, input_dim), normalised
    Y: np.ndarray  # (pred_len, d), normalised
    anchor: np.ndarray  # (d,)
    scale: np.ndarray  # (d,)
    kind: str = "offset"
    scene: str = ""
    agent: str = ""
    start: int = 0

    @property
    def output_dim(self) -> int:
        return self.Y.shape[1]

    def positions(self) -> np.ndarray:
        """Observed and future positions in the normalised frame."""
        d = self.output_dim
        return np.concatenate([self.X[:, :d], self.Y], axis=0)

    def step_targets(self) -> np.ndarray:
        """Future seen from each encoder step: ``(obs_len, pred_len, d)``."""
        pos = self.positions()
        n_obs, n_pred = self.X.shape[0], self.Y.shape[0]
        return np.stack([pos[t + 1 : t + 1 + n_pred] for t in range(n_obs)])

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.scale + self.anchor

    def future(self) -> np.ndarray:
        return self.denormalize(self.Y)


@dataclass
class SplitPlan:
    """Scene-based or ratio-based partition of tracks."""

    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    leave_one_out: bool = False
    ratios: tuple[float, float, float] | None = None
    seed: int = 0

    def validate(self):
        named = [set(self.train), set(self.val), set(self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                both = named[i] & named[j]
                if both:
                    raise SplitError(f"scenes {sorted(both)} appear in two partitions")
        if self.ratios is not None:
            if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
                raise SplitError("split.ratios must be three non-negative numbers summing to 1")


# ----------------------------------------------------------------------------
# loading


def _segments(frames: np.ndarray, stride: int) -> list[slice]:
    breaks = np.nonzero(np.diff(frames) != stride)[0] + 1
    edges = [0, *breaks.tolist(), len(frames)]
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _infer_stride(groups: dict) -> int:
    diffs = [np.diff(f) for f, _ in groups.values() if len(f) > 1]
    diffs = np.concatenate(diffs) if diffs else np.array([1])
    diffs = diffs[diffs > 0]
    return int(diffs.min()) if diffs.size else 1


def _build_tracks(groups, scene, stride, fps, aux_groups=None) -> list[AgentTrack]:
    stride = stride or _infer_stride(groups)
    tracks = []
    for agent in sorted(groups, key=_natural_key):
        frames, states = groups[agent]
        order = np.argsort(frames, kind="stable")
        frames, states = frames[order], states[order]
        if np.any(np.diff(frames) == 0):
            raise ParseError(f"{scene}: agent {agent} has duplicate frames")
        aux = aux_groups[agent][order] if aux_groups else None
        for seg in _segments(frames, stride):
            tracks.append(AgentTrack(agent, scene, frames[seg], states[seg],
                                     None if aux is None else aux[seg], fps))
    return tracks


def _natural_key(agent: str):
    try:
        return (0, float(agent), agent)
    except ValueError:
        return (1, 0.0, agent)


def load_bev_text(path, stride: int = 0, fps: float = 2.5, scene: str | None = None) -> list[AgentTrack]:
    """Parse whitespace-separated ``frame agent_id x y`` rows.

    Tracks are grouped by agent, sorted by frame and split wherever the frame
    step differs from ``stride`` (inferred as the smallest step when 0).
    """
    path = Path(path)
    scene = scene or path.stem
    rows: dict[str, tuple[list, list]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                frame = float(parts[0])
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if frame != int(frame) or not (math.isfinite(x) and math.isfinite(y)):
                raise ParseError(f"{path}:{lineno}: non-integer frame or non-finite coordinate")
            agent = parts[1]
            if agent.endswith(".0"):
                agent = agent[:-2]
            fr, st = rows.setdefault(agent, ([], []))
            fr.append(int(frame))
            st.append((x, y))
    groups = {a: (np.asarray(f, dtype=np.int64), np.asarray(s, dtype=np.float64)) for a, (f, s) in rows.items()}
    return _build_tracks(groups, scene, stride, fps)


BBOX_HEADER = ["frame", "agent_id", "x1", "y1", "x2", "y2"]


def load_bbox_csv(path, stride: int = 0, fps: float = 30.0, scene: str | None = None) -> list[AgentTrack]:
    """Parse ``frame,agent_id,x1,y1,x2,y2[,aux...]`` with a mandatory header."""
    path = Path(path)
    scene = scene or path.stem
    rows: dict[str, tuple[list, list, list]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:6]] != BBOX_HEADER:
            raise ParseError(f"{path}:1: header must start with {','.join(BBOX_HEADER)}")
        n_aux = len(header) - 6
        for lineno, parts in enumerate(reader, 2):
            if not parts or all(not p.strip() for p in parts):
                continue
            if len(parts) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            try:
                frame = int(parts[0])
                vals = [float(v) for v in parts[2:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            x1, y1, x2, y2 = vals[:4]
            if x2 < x1 or y2 < y1:
                raise ParseError(f"{path}:{lineno}: box has negative extent")
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(f"{path}:{lineno}: non-finite value")
            fr, st, ax = rows.setdefault(parts[1].strip(), ([], [], []))
            fr.append(frame)
            st.append(vals[:4])
            ax.append(vals[4:])
    groups = {a: (np.asarray(f, dtype=np.int64), np.asarray(s, dtype=np.float64)) for a, (f, s, _) in rows.items()}
    aux = None
    if n_aux:
        aux = {a: np.asarray(x, dtype=np.float64).reshape(-1, n_aux) for a, (_, _, x) in rows.items()}
    return _build_tracks(groups, scene, stride, fps, aux)


def load_path(path, spec: DatasetSpec) -> list[AgentTrack]:
    """Load one file or every data file in a directory (lexicographic order)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data path {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith(".")) if path.is_dir() else [path]
    tracks: list[AgentTrack] = []
    for f in files:
        if spec.format == "bbox-csv":
            tracks.extend(load_bbox_csv(f, spec.stride, spec.fps))
        else:
            tracks.extend(load_bev_text(f, spec.stride, spec.fps))
    return tracks


def write_bev_text(tracks: Iterable[AgentTrack], path) -> None:
    lines = []
    for tr in tracks:
        for f, (x, y) in zip(tr.frames, tr.centroids):
            lines.append(f"{int(f)} {tr.agent_id} {x:.6f} {y:.6f}")
    lines.sort(key=lambda s: (int(s.split()[0]), _natural_key(s.split()[1])))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# features and windows


def derive_motion_features(track: AgentTrack, dt: float = 1.0) -> AgentTrack | None:
    """Attach velocity and acceleration (backward differences / ``dt``).

    The first entries are padded by repeating the earliest defined value.
    Returns None (with a warning) for tracks shorter than 3 frames.
    """
    if len(track) < 3:
        log.warning("track %s/%s has %d frames; skipping motion features", track.scene_id, track.agent_id, len(track))
        return None
    pos = track.states
    vel = np.diff(pos, axis=0) / dt
    vel = np.concatenate([vel[:1], vel], axis=0)
    acc = np.diff(vel, axis=0) / dt
    acc = np.concatenate([acc[:1], acc], axis=0)
    return replace(track, features=np.concatenate([vel, acc], axis=1))


def window_starts(n: int, spec: DatasetSpec) -> list[int]:
    if n < spec.min_track_len:
        return []
    return list(range(0, n - spec.window_len + 1, spec.window_stride))


def make_windows(tracks: Sequence[AgentTrack], spec: DatasetSpec) -> list[ObservationWindow]:
    """Cut fixed-length windows from every track and normalise them."""
    windows = []
    for tr in tracks:
        starts = window_starts(len(tr), spec)
        if not starts:
            continue
        if spec.motion_features and tr.features is None:
            tr = derive_motion_features(tr)
            if tr is None:
                continue
        for s in starts:
            windows.append(normalize(_raw_window(tr, s, spec), spec))
    return windows


def _raw_window(tr: AgentTrack, start: int, spec: DatasetSpec) -> ObservationWindow:
    obs = slice(start, start + spec.obs_len)
    fut = slice(start + spec.obs_len, start + spec.window_len)
    cols = [tr.states[obs]]
    if spec.motion_features:
        cols.append(tr.features[obs])
    if tr.aux is not None:
        cols.append(tr.aux[obs])
    d = tr.states.shape[1]
    return ObservationWindow(
        X=np.concatenate(cols, axis=1), Y=tr.states[fut].copy(),
        anchor=np.zeros(d), scale=np.ones(d), kind="raw",
        scene=tr.scene_id, agent=tr.agent_id, start=int(tr.frames[start]))


def normalize(window: ObservationWindow, spec_or_kind) -> ObservationWindow:
    """Map a raw window into the model frame, recording how to undo it.

    ``offset`` subtracts the last observed position; ``pixel`` divides box
    coordinates (and their derived motion columns) by the frame size.
    """
    kind = spec_or_kind.coord_kind if isinstance(spec_or_kind, DatasetSpec) else spec_or_kind
    d = window.Y.shape[1]
    X = window.X.astype(np.float64).copy()
    Y = window.Y.astype(np.float64).copy()
    if kind == "offset":
        anchor = X[-1, :d].copy()
        scale = np.ones(d)
        X[:, :d] -= anchor
        Y -= anchor
    elif kind == "pixel":
        if not isinstance(spec_or_kind, DatasetSpec):
            raise ValueError("pixel normalisation needs a DatasetSpec with the frame size")
        wh = np.array([spec_or_kind.frame_width, spec_or_kind.frame_height])
        scale = np.tile(wh, d // 2)
        anchor = np.zeros(d)
        X[:, :d] /= scale
        if X.shape[1] >= 3 * d and spec_or_kind.motion_features:
            X[:, d : 3 * d] /= np.tile(scale, 2)
        Y /= scale
    else:
        raise ValueError(f"unknown normalisation kind {kind!r}")
    return replace(window, X=X, Y=Y, anchor=anchor, scale=scale, kind=kind)


def denormalize(window: ObservationWindow, values) -> np.ndarray:
    return window.denormalize(values)


def batch_arrays(windows: Sequence[ObservationWindow]) -> tuple[np.ndarray, np.ndarray]:
    """Stack observations ``(B, obs_len, D)`` and per-step targets ``(B, obs_len, pred_len, d)``."""
    X = np.stack([w.X for w in windows])
    T = np.stack([w.step_targets() for w in windows])
    return X, T


# ----------------------------------------------------------------------------
# splits


def split(tracks: Sequence[AgentTrack], plan: SplitPlan) -> dict[str, list[AgentTrack]]:
    """Partition tracks by scene names or by seeded ratios."""
    plan.validate()
    if plan.ratios is not None:
        order = np.random.default_rng(plan.seed).permutation(len(tracks))
        n = len(tracks)
        n_train = int(round(plan.ratios[0] * n))
        n_val = int(round(plan.ratios[1] * n))
        parts = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
        return {k: [tracks[i] for i in sorted(v)] for k, v in parts.items()}
    out = {"train": [], "val": [], "test": []}
    named = {"train": set(plan.train), "val": set(plan.val), "test": set(plan.test)}
    for tr in tracks:
        hits = [k for k, names in named.items() if tr.scene_id in names]
        if not hits and not plan.train:
            hits = ["train"]
        for k in hits:
            out[k].append(tr)
    return out


def leave_one_out(tracks: Sequence[AgentTrack]) -> list[tuple[str, dict[str, list[AgentTrack]]]]:
    """One fold per scene: that scene is the test set, the rest train."""
    scenes = sorted({t.scene_id for t in tracks})
    folds = []
    for s in scenes:
        plan = SplitPlan(train=[x for x in scenes if x != s], test=[s])
        folds.append((s, split(tracks, plan)))
    return folds


# ----------------------------------------------------------------------------
# synthetic data


def constant_velocity_track(start, velocity, steps: int) -> np.ndarray:
    t = np.arange(steps)[:, None]
    return np.asarray(start, dtype=np.float64) + t * np.asarray(velocity, dtype=np.float64)


def piecewise_goal_track(rng: np.random.Generator, steps: int, goal_every: int, speed: float,
                         turn: float = math.pi / 2, start=None, heading=None) -> tuple[np.ndarray, np.ndarray]:
    """Agent that walks to a new goal every ``goal_every`` steps.

    Each goal lies ``speed * goal_every`` ahead of the previous one, rotated by
    a heading change uniform in ``[-turn, turn]``. Within a segment the agent
    eases its velocity toward the remaining straight line, arriving exactly on
    the goal. Returns positions ``(steps, 2)`` and goals ``(n_goals, 2)``.
    """
    p = np.zeros(2) if start is None else np.asarray(start, dtype=np.float64)
    heading = rng.uniform(0, 2 * math.pi) if heading is None else heading
    v = speed * np.array([math.cos(heading), math.sin(heading)])
    out = [p.copy()]
    goals = []
    while len(out) < steps:
        heading += rng.uniform(-turn, turn)
        goal = p + speed * goal_every * np.array([math.cos(heading), math.sin(heading)])
        goals.append(goal)
        for remaining in range(goal_every, 0, -1):
            desired = (goal - p) / remaining
            # blend with current velocity early in the segment, exact on arrival
            w = 0.5 if remaining > 1 else 1.0
            v = (1 - w) * v + w * desired
            if remaining == 1:
                v = goal - p
            p = p + v
            out.append(p.copy())
    return np.asarray(out[:steps]), np.asarray(goals)


def circular_track(center, radius: float, omega: float, phase: float, steps: int) -> np.ndarray:
    ang = phase + omega * np.arange(steps)
    return np.asarray(center, dtype=np.float64) + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def synth_generate(kind: str, n: int, seed: int, noise: float = 0.0, length: int = 20,
                   goal_every: int = 6, scene: str = "synthetic", fps: float = 2.5) -> list[AgentTrack]:
    """Generate ``n`` synthetic agents of ``length`` frames each."""
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}, expected one of {SYNTH_KINDS}")
    rng = np.random.default_rng(seed)
    tracks = []
    for i in range(n):
        if kind == "constant-velocity":
            start = rng.uniform(-5, 5, size=2)
            heading = rng.uniform(0, 2 * math.pi)
            speed = rng.uniform(0.2, 0.6)
            pos = constant_velocity_track(start, speed * np.array([math.cos(heading), math.sin(heading)]), length)
        elif kind == "piecewise-goal":
            start = rng.uniform(-5, 5, size=2)
            pos, _ = piecewise_goal_track(rng, length, goal_every, rng.uniform(0.2, 0.6), start=start)
        else:
            center = rng.uniform(-5, 5, size=2)
            radius = rng.uniform(1.0, 5.0)
            omega = rng.uniform(0.05, 0.3) * rng.choice([-1.0, 1.0])
            pos = circular_track(center, radius, omega, rng.uniform(0, 2 * math.pi), length)
        if noise > 0:
            pos = pos + rng.normal(0.0, noise, size=pos.shape)
        tracks.append(AgentTrack(str(i), scene, np.arange(length, dtype=np.int64), pos, fps=fps))
    return tracks
