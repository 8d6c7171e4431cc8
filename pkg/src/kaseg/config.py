"""Declarative run configuration.

The file format is one ``section.key = value`` assignment per line; ``#``
starts a comment.  Every key has a default, unknown keys are errors, and
command-line overrides (``section.key=value``) are applied after the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .data import DatasetSpec
from .distill import DistillWeights
from .models import STUDENT_OS, TEACHER_OS


class ConfigError(ValueError):
    def __init__(self, message: str, where: Optional[str] = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class DataSection:
    root: str = "data"
    num_train: int = 200
    num_val: int = 50
    image_size: int = 64
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 3
    noise: float = 0.08
    seed: int = 0


@dataclass
class Schedule:
    lr: float = 0.007
    iterations: int = 2000
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 4e-5
    power: float = 0.9


@dataclass
class TeacherSection(Schedule):
    output_stride: int = 8
    lr: float = 0.05
    iterations: int = 5000


@dataclass
class StudentSection(Schedule):
    output_stride: int = 16
    lr: float = 0.05
    adapter_depth: int = 3


@dataclass
class TranslatorSection:
    lr: float = 0.1
    epochs: int = 1
    batch_size: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9


@dataclass
class DistillSection:
    alpha: float = 1e-7
    beta: float = 50.0
    gamma: float = 1.0
    p: int = 2
    q: int = 2
    temperature: float = 2.0
    kd_weight: float = 1.0
    fitnet_weight: float = 1.0


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    augment: bool = True
    eval_every: int = 500
    checkpoint_every: int = 500
    out_dir: str = "runs"


SECTIONS = {
    "data": DataSection,
    "teacher": TeacherSection,
    "student": StudentSection,
    "translator": TranslatorSection,
    "distill": DistillSection,
    "run": RunSection,
}

# keys that only locate files; they never influence numbers
PATH_KEYS = {("data", "root"), ("run", "out_dir")}

# sections whose values determine each stage's results
STAGE_SECTIONS = {
    "teacher": ("data", "teacher", "run"),
    "translator": ("data", "teacher", "translator", "run"),
    "student": ("data", "teacher", "translator", "student", "distill", "run"),
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    translator: TranslatorSection = field(default_factory=TranslatorSection)
    distill: DistillSection = field(default_factory=DistillSection)
    run: RunSection = field(default_factory=RunSection)

    def items(self, sections: Iterable[str] = tuple(SECTIONS)):
        for name in sections:
            sec = getattr(self, name)
            for f in dataclasses.fields(sec):
                yield name, f.name, getattr(sec, f.name)

    def dumps(self) -> str:
        return "".join(f"{s}.{k} = {_format(v)}\n" for s, k, v in self.items())

    def stage_hash(self, stage: str) -> int:
        """64-bit digest of everything that can change a stage's output."""
        text = "".join(
            f"{s}.{k}={_format(v)}\n"
            for s, k, v in self.items(STAGE_SECTIONS[stage])
            if (s, k) not in PATH_KEYS
        )
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")

    def dataset_spec(self) -> DatasetSpec:
        d = self.data
        return DatasetSpec(d.num_train, d.num_val, d.image_size, d.num_classes,
                           d.min_shapes, d.max_shapes, d.noise, d.seed)

    def weights(self) -> DistillWeights:
        d = self.distill
        return DistillWeights(d.alpha, d.beta, d.gamma, d.p, d.q)

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        cfg = dataclasses.replace(self, **{
            name: dataclasses.replace(getattr(self, name)) for name in SECTIONS
        })
        for i, item in enumerate(overrides, start=1):
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}", f"override {i}")
            key, value = item.split("=", 1)
            _assign(cfg, key.strip(), value.strip(), f"override {i}")
        validate(cfg)
        return cfg


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(raw: str, kind, where: str):
    if raw == "":
        raise ConfigError("missing value", where)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {kind.__name__}", where) from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _assign(cfg: RunConfig, key: str, raw: str, where: str) -> None:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown key {key!r}", where)
    sec = getattr(cfg, section)
    types = {f.name: f.type for f in dataclasses.fields(sec)}
    if name not in types:
        raise ConfigError(f"unknown key {key!r}", where)
    kind = types[name]
    kind = _TYPES[kind] if isinstance(kind, str) else kind
    setattr(sec, name, _convert(raw, kind, where))


def validate(cfg: RunConfig) -> None:
    try:
        cfg.dataset_spec()
        cfg.weights()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for name in ("teacher", "student", "translator"):
        sec = getattr(cfg, name)
        if sec.lr <= 0 or sec.power <= 0:
            raise ConfigError(f"{name}: lr and power must be positive")
        if sec.batch_size < 2:
            raise ConfigError(f"{name}: batch_size must be >= 2 for batch norm")
        if sec.weight_decay < 0 or not 0 <= sec.momentum < 1:
            raise ConfigError(f"{name}: need weight_decay >= 0 and 0 <= momentum < 1")
    if cfg.teacher.iterations < 1 or cfg.student.iterations < 1 or cfg.translator.epochs < 1:
        raise ConfigError("iteration and epoch counts must be positive")
    if cfg.teacher.output_stride not in TEACHER_OS:
        raise ConfigError(f"teacher.output_stride must be one of {TEACHER_OS}")
    if cfg.student.output_stride not in STUDENT_OS:
        raise ConfigError(f"student.output_stride must be one of {STUDENT_OS}")
    if cfg.student.adapter_depth not in (1, 3):
        raise ConfigError("student.adapter_depth must be 1 or 3")
    if cfg.distill.temperature <= 0:
        raise ConfigError("distill.temperature must be positive")
    if cfg.run.threads < 1:
        raise ConfigError("run.threads must be positive")
    if cfg.run.eval_every < 0 or cfg.run.checkpoint_every < 0:
        raise ConfigError("run.eval_every and run.checkpoint_every must be >= 0")


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", where)
        key, value = line.split("=", 1)
        _assign(cfg, key.strip(), value.strip(), where)
    validate(cfg)
    return cfg


def parse_config(path: Optional[str | os.PathLike] = None,
                 overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file (if any), then overrides."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ConfigError("config file not found", str(path)) from None
        cfg = parse_text(text, str(path))
    return cfg.with_overrides(overrides)
