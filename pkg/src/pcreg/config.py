"""Typed run configuration stored as flat ``key = value`` sections."""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import get_type_hints

from .data import SHAPE_KINDS, DatasetConfig
from .errors import ParameterError, ParseError, ValidationError
from .pipeline import ALGORITHMS, ModelConfig, TrainConfig

CONFIG_ENV = "PCREG_CONFIG"


@dataclass(frozen=True)
class DataSettings:
    n_points: int = 1024
    keep_points: int = 768
    rot_max_deg: float = 45.0
    trans_max: float = 0.5
    noise_sigma: float = 0.0
    noise_clip: float = 0.5
    seed: int = 0
    pairs: int = 500
    shapes: tuple[str, ...] = ("composite",)


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 10.0


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 50
    seed: int = 0
    pos_samples: int = 64
    neg_samples: int = 64
    accumulate: int = 1
    shuffle: bool = True


@dataclass(frozen=True)
class EvalSettings:
    algorithm: str = "mfgnet"
    icp_max_iter: int = 2000
    icp_tol: float = 1e-8
    workers: int = 1


@dataclass(frozen=True)
class PathSettings:
    dataset: str = ""
    output: str = ""
    checkpoint: str = ""


SECTIONS = {
    "data": DataSettings,
    "model": ModelConfig,
    "optim": OptimSettings,
    "train": TrainSettings,
    "eval": EvalSettings,
    "paths": PathSettings,
}


def _parse_value(text: str, kind, where: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        item = kind.__args__[0]
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(_parse_value(p, item, where) for p in parts)
    except ValueError:
        raise ValidationError(f"{where}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass(frozen=True)
class RunConfig:
    """All settings for one experiment; every field has the published default."""

    data: DataSettings = field(default_factory=DataSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimSettings = field(default_factory=OptimSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def __post_init__(self):
        for s in self.data.shapes:
            if s not in SHAPE_KINDS:
                raise ValidationError(f"data.shapes: unknown shape {s!r}; choose from {SHAPE_KINDS}")
        if not self.data.shapes:
            raise ValidationError("data.shapes must list at least one shape")
        if self.eval.algorithm not in ALGORITHMS:
            raise ValidationError(f"eval.algorithm must be one of {ALGORITHMS}")
        try:
            self.dataset_config()
        except ParameterError as exc:
            raise ValidationError(f"[data] {exc}") from None

    # conversion ----------------------------------------------------------------

    def dataset_config(self) -> DatasetConfig:
        d = asdict(self.data)
        return DatasetConfig(**{f.name: d[f.name] for f in fields(DatasetConfig)})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.optim), **asdict(self.train))

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with the given keys of one section replaced; ``None`` values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        known = {f.name for f in fields(current)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"[{section}] unknown keys: {', '.join(sorted(unknown))}")
        return replace(self, **{section: replace(current, **values)})

    # text form ---------------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in fields(getattr(self, name)):
                lines.append(f"{f.name} = {_format_value(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            raise ParseError(str(exc).splitlines()[0], source, line) from None
        sections = {}
        for name in parser.sections():
            if name not in SECTIONS:
                raise ValidationError(f"{source}: unknown section [{name}]")
            kind = SECTIONS[name]
            hints = get_type_hints(kind)
            known = {f.name for f in fields(kind)}
            values = {}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ValidationError(f"{source}: unknown key {key!r} in [{name}]")
                values[key] = _parse_value(raw, hints[key], f"{source}: [{name}] {key}")
            try:
                sections[name] = kind(**values)
            except ParameterError as exc:
                raise ValidationError(f"{source}: [{name}] {exc}") from None
        return cls(**sections)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ParseError(f"cannot read config: {exc.strerror}", path) from None
        return cls.from_text(text, str(path))


def load_run_config(path=None) -> RunConfig:
    """Config from ``path``, else from ``$PCREG_CONFIG``, else the defaults."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    return RunConfig() if path is None else RunConfig.load(path)
