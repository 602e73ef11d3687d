"""Run configuration: flat ``key = value`` text with section prefixes.

Sections are ``model.``, ``train.``, ``data.`` and ``split.``. Lines starting
with ``#`` are comments. Values are coerced to the type of the field's
default; list fields take comma-separated items.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import COORD_KINDS, FORMATS, SYNTH_KINDS, DatasetSpec, SplitError, SplitPlan
from .model import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    path: str = ""
    format: str = "bev-text"
    fps: float = 2.5
    stride: int = 0
    overlap: float = 0.5
    coord_kind: str = "offset"
    min_track_seconds: float = 0.0
    motion_features: bool = True
    frame_width: float = 1920.0
    frame_height: float = 1080.0
    # used when format = synthetic
    synth_kind: str = "constant-velocity"
    synth_n: int = 200
    synth_seed: int = 0
    synth_noise: float = 0.05
    synth_goal_every: int = 6

    def validate(self):
        if self.format not in FORMATS:
            raise ConfigError(f"data.format: expected one of {FORMATS}, got {self.format!r}")
        if self.format != "synthetic" and not self.path:
            raise ConfigError("data.path: required unless data.format = synthetic")
        if self.coord_kind not in COORD_KINDS:
            raise ConfigError(f"data.coord_kind: expected one of {COORD_KINDS}, got {self.coord_kind!r}")
        if self.synth_kind not in SYNTH_KINDS:
            raise ConfigError(f"data.synth_kind: expected one of {SYNTH_KINDS}, got {self.synth_kind!r}")
        if self.synth_n < 1 or self.synth_goal_every < 1:
            raise ConfigError("data.synth_n and data.synth_goal_every must be >= 1")
        if self.synth_noise < 0:
            raise ConfigError("data.synth_noise: must be >= 0")

    def dataset_spec(self, model: ModelConfig) -> DatasetSpec:
        try:
            return DatasetSpec(format=self.format, fps=self.fps, stride=self.stride, obs_len=model.obs_len,
                               pred_len=model.pred_len, overlap=self.overlap, coord_kind=self.coord_kind,
                               min_track_seconds=self.min_track_seconds, motion_features=self.motion_features,
                               frame_width=self.frame_width, frame_height=self.frame_height)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class SplitConfig:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    # ignored when scene names are given; an empty value also forces name-based splitting
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0
    leave_one_out: bool = False

    def plan(self) -> SplitPlan:
        by_name = bool(self.train or self.val or self.test)
        plan = SplitPlan(train=list(self.train), val=list(self.val), test=list(self.test),
                         leave_one_out=self.leave_one_out,
                         ratios=None if by_name or not self.ratios else tuple(self.ratios), seed=self.seed)
        try:
            plan.validate()
        except SplitError as exc:
            raise ConfigError(f"split: {exc}") from None
        return plan

    def validate(self):
        self.plan()


SECTIONS = ("model", "train", "data", "split")


def _coerce(key: str, raw: str, default):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            value = float(text)
            if value != int(value):
                raise ValueError(f"not an integer: {text!r}")
            return int(value)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float):
                return [float(t) for t in items]
            return items
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


@dataclass
class RunConfig:
    """Merged model, training, data and split settings."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    # keys given explicitly (file or overrides); others may be inferred from data
    explicit: set = field(default_factory=set)

    @classmethod
    def from_pairs(cls, pairs: list[tuple[str, str]]) -> "RunConfig":
        values: dict[str, dict] = {s: {} for s in SECTIONS}
        defaults = {"model": ModelConfig(), "train": TrainConfig(), "data": DataConfig(), "split": SplitConfig()}
        for key, raw in pairs:
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"{key}: unknown section, expected one of {', '.join(s + '.' for s in SECTIONS)}")
            known = {f.name for f in fields(defaults[section])}
            if name not in known:
                raise ConfigError(f"{key}: unknown key")
            values[section][name] = _coerce(key, raw, getattr(defaults[section], name))
        try:
            model = ModelConfig(**values["model"])
            train = TrainConfig(**values["train"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        data = replace(defaults["data"], **values["data"])
        split = replace(defaults["split"], **values["split"])
        cfg = cls(model, train, data, split, {k for k, _ in pairs})
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None, source: str = "config") -> "RunConfig":
        return cls.from_pairs(parse_text(text, source) + parse_overrides(overrides or []))

    @classmethod
    def from_file(cls, path, overrides: list[str] | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} does not exist")
        return cls.from_text(path.read_text(encoding="utf-8"), overrides, str(path))

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.split.validate()
        self.data.dataset_spec(self.model)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        extra = parse_overrides(overrides)
        cfg = RunConfig.from_pairs(self.pairs() + extra)
        cfg.explicit = self.explicit | {k for k, _ in extra}
        return cfg

    def pairs(self) -> list[tuple[str, str]]:
        out = []
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                out.append((f"{section}.{f.name}", _format(getattr(obj, f.name))))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.pairs())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "config") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        key, sep, value = body.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_overrides(items: list[str]) -> list[tuple[str, str]]:
    return parse_text("\n".join(items), "--set")
