"""Flat ``section.key = value`` experiment configs with one include level and env overrides."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .p4d import DistillConfig
from .scenegen import SceneConfig
from .student import StudentConfig
from .teacher4d import PretrainConfig, TeacherConfig

ENV_PREFIX = "P4D_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    teacher_train: int = 800
    teacher_val: int = 64
    train: int = 200
    test: int = 64
    categories: tuple[str, ...] = ("VG", "DM", "SR", "R", "C", "T", "FP", "SA", "DP")


@dataclass
class EvalConfig:
    formats: tuple[str, ...] = ("text", "csv", "json")


@dataclass
class SweepConfig:
    rows: tuple[str, ...] = ("Zero-shot", "4D-SFT", "LD-Only", "ED-Only", "LD+ED")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_record(self) -> dict:
        return asdict(self)

    def set(self, dotted: str, raw: str, origin: str = "") -> None:
        section, _, key = dotted.partition(".")
        where = f" ({origin})" if origin else ""
        if not key or section not in SECTIONS:
            raise ConfigError(f"unknown config key {dotted!r}{where}; sections are {sorted(SECTIONS)}")
        sub = getattr(self, section)
        hints = typing.get_type_hints(type(sub))
        names = {f.name for f in dataclasses.fields(sub)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section {section!r}{where}; valid keys: {sorted(names)}")
        try:
            value = coerce(raw, hints[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {dotted}{where}: {exc}") from exc
        setattr(sub, key, value)


SECTIONS = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def coerce(raw: str, tp):
    """Parse ``raw`` into the annotated type; tuples are comma separated, dicts ``k:v`` pairs."""
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if raw.lower() == "none" and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return coerce(raw, inner[0])
    if tp is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tp in (int, float, str):
        return tp(raw)
    if origin is tuple:
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(coerce(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {len(parts)}")
        return tuple(coerce(p, a) for p, a in zip(parts, args))
    if origin is dict or tp is dict:
        out = {}
        for item in raw.split(","):
            k, sep, v = item.partition(":")
            if not sep:
                raise ValueError(f"expected key:value pairs, got {item!r}")
            out[k.strip()] = float(v)
        return out
    raise TypeError(f"unsupported config type {tp}")


def _read_lines(path: Path, allow_include: bool) -> list[tuple[str, str, str]]:
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        origin = f"{path}:{lineno}"
        if key == "include":
            if not allow_include:
                raise ConfigError(f"{origin}: nested include is not allowed (one level only)")
            inc = (path.parent / value.strip()).resolve()
            if not inc.exists():
                raise ConfigError(f"{origin}: included file {inc} not found")
            entries.extend(_read_lines(inc, allow_include=False))
        else:
            entries.append((key, value, origin))
    return entries


def load_config(path=None, env: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file (includes first, in place), then ``P4D_<SECTION>__<KEY>`` variables."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        for key, value, origin in _read_lines(path, allow_include=True):
            cfg.set(key, value, origin)
    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        section, sep, key = name[len(ENV_PREFIX):].partition("__")
        if not sep:
            raise ConfigError(f"environment override {name} must look like {ENV_PREFIX}<SECTION>__<KEY>")
        cfg.set(f"{section.lower()}.{key.lower()}", value, f"env {name}")
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render as a flat config file that ``load_config`` reads back to an equal object."""
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            v = getattr(sub, f.name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif v is None:
                text = "none"
            elif isinstance(v, (tuple, list)):
                text = ", ".join(str(x) for x in v)
            elif isinstance(v, dict):
                text = ", ".join(f"{k}:{x!r}" for k, x in v.items())
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{section}.{f.name} = {text}")
    return "\n".join(lines) + "\n"
