"""Run configuration as a flat ``section.key=value`` text file.

Sections are ``model``, ``train``, ``data`` and ``eval``. Every field of the
model and training configs is addressable; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .evaluation import BACKENDS
from .model import ModelConfig
from .training import TrainConfig

PRESETS = ("paper", "desk")


@dataclass
class DataConfig:
    train_manifest: str = ""
    probe_manifest: str = ""
    gallery_manifest: str = ""


@dataclass
class EvalConfig:
    trials: int = 10
    backend: str = "verification"
    probe_camera: int = 0
    gallery_camera: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError(f"eval.trials must be >= 1, got {self.trials}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"eval.backend must be one of {BACKENDS}, got {self.backend!r}")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, like, key: str):
    """Parse ``text`` into the type of the default value ``like``."""
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(like, Fraction):
            return Fraction(text)
        if isinstance(like, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name == "paper":
            return cls(model=ModelConfig.paper())
        if name == "desk":
            return cls(model=ModelConfig.desk(),
                       train=TrainConfig(lr0=0.01, decay_every=5000, stage_iters=(150, 50, 2000)))
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")

    # text form -------------------------------------------------------------

    def items(self) -> list[tuple[str, str]]:
        out = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in dataclasses.fields(obj):
                out.append((f"{sec}.{f.name}", _format(getattr(obj, f.name))))
        return out

    def serialize(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, pairs: Iterable[tuple[str, str]]) -> "RunConfig":
        """Apply ``(key, value)`` overrides in order; later keys win."""
        values: dict[str, dict] = {sec: {} for sec in SECTIONS}
        for key, text in pairs:
            sec, _, name = key.strip().partition(".")
            if sec not in SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}; expected one of the sections {tuple(SECTIONS)}")
            obj = getattr(self, sec)
            names = {f.name for f in dataclasses.fields(obj)}
            if name not in names:
                raise ConfigError(f"unknown config key {key!r}")
            values[sec][name] = _parse(text, getattr(obj, name), key)
        parts = {sec: dataclasses.replace(getattr(self, sec), **values[sec]) if values[sec]
                 else getattr(self, sec) for sec in SECTIONS}
        return RunConfig(**parts)

    @classmethod
    def parse(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            k, _, v = line.partition("=")
            pairs.append((k, v))
        return (base or cls()).with_overrides(pairs)

    @classmethod
    def load(cls, source: str) -> "RunConfig":
        """Load a config file, or a preset when ``source`` names one and no
        such file exists."""
        p = Path(source)
        if p.is_file():
            return cls.parse(p.read_text(encoding="utf-8"))
        if source in PRESETS:
            return cls.preset(source)
        raise FileNotFoundError(f"config file not found: {source}")

    def save(self, path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    k, _, v = text.partition("=")
    return k.strip(), v
