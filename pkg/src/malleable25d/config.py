"""Run configuration: typed dataclass sections, key-value files and dotted overrides.

Precedence, lowest first: dataclass defaults, ``--config`` file, ``--seed``,
``--set key=value``. Every key is ``section.field``; unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import tomli

from . import kvfile
from .checks import GradcheckConfig, OracleConfig
from .network import NetConfig
from .synth import SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration key; the message names the key."""


@dataclass
class DataConfig:
    manifest: str = ""


@dataclass
class AblateConfig:
    # each entry is a comma-separated freeze set; "none" trains everything
    variants: list = field(default_factory=lambda: ["a,t,b", "none"])


@dataclass
class RfExportConfig:
    checkpoint: str = ""  # empty: default initialization with `kernels`
    layer: int = -1  # -1: last malleable block
    kernels: int = 3
    d_min: float = -4.0
    d_max: float = 4.0
    steps: int = 801
    alpha: float = 8.3
    compare_depths: list = field(default_factory=lambda: [1.0, 20.0])
    focal: float = 518.8
    delta_p: float = 1.0
    hard: bool = True


@dataclass
class HistConfig:
    checkpoint: str = ""
    manifest: str = ""
    split: str = "test"
    layer: int = -1


@dataclass
class DumpConfig:
    checkpoint: str = ""
    manifest: str = ""
    sample: int = 0
    layer: int = -1


@dataclass
class BudgetConfig:
    c_in: int = 256
    c_out: int = 256
    kernel: int = 3
    kernels: int = 3
    height: int = 64
    width: int = 64
    bias: bool = False


SECTIONS = {
    "gradcheck": GradcheckConfig,
    "oracle": OracleConfig,
    "scene": SceneConfig,
    "data": DataConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "ablate": AblateConfig,
    "rf": RfExportConfig,
    "hist": HistConfig,
    "dump": DumpConfig,
    "budget": BudgetConfig,
}

COMMAND_SECTIONS = {
    "gradcheck": ("gradcheck",),
    "oracle": ("oracle",),
    "synth": ("scene",),
    "train": ("data", "net", "train"),
    "ablate": ("data", "net", "train", "ablate"),
    "export-rf": ("rf",),
    "assign-hist": ("hist",),
    "dump-features": ("dump",),
    "budget": ("budget",),
}


def _fields(section: str) -> dict:
    return {f.name: f for f in dataclasses.fields(SECTIONS[section])}


def default_value(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _check_type(key: str, f: dataclasses.Field, value):
    ann = str(f.type)
    allowed = []
    if "None" in ann and value is None:
        return value
    if ann.startswith("bool"):
        allowed = [bool]
    elif ann.startswith("int"):
        allowed = [int]
    elif ann.startswith("float"):
        allowed = [int, float]
    elif ann.startswith("str"):
        allowed = [str]
    elif ann.startswith("list"):
        allowed = [list]
    ok = any(isinstance(value, t) for t in allowed)
    if ok and not ann.startswith("bool") and isinstance(value, bool):
        ok = False
    if not ok:
        raise ConfigError(f"{key}: expected {ann}, got {type(value).__name__} {value!r}")
    if ann.startswith("float"):
        return float(value)
    return value


def parse_value(text: str):
    """TOML literal if it parses, otherwise the raw string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    return key.strip(), parse_value(text.strip())


@dataclass
class RunConfig:
    command: str
    values: dict  # "section.field" -> value

    @classmethod
    def build(cls, command: str, config_path=None, seed=None, overrides=()) -> "RunConfig":
        if command not in COMMAND_SECTIONS:
            raise ConfigError(f"unknown subcommand {command!r}")
        sections = COMMAND_SECTIONS[command]
        values = {}
        for sec in sections:
            for name, f in _fields(sec).items():
                values[f"{sec}.{name}"] = default_value(f)
        items = []
        if config_path is not None:
            items += list(kvfile.read_kv(config_path).items())
        if seed is not None:
            items += [(f"{sec}.seed", int(seed)) for sec in sections if "seed" in _fields(sec)]
        items += [parse_override(o) if isinstance(o, str) else o for o in overrides]
        for key, value in items:
            if key not in values:
                raise ConfigError(f"unknown key {key!r} for subcommand {command!r}")
            sec, name = key.split(".", 1)
            values[key] = _check_type(key, _fields(sec)[name], value)
        rc = cls(command, values)
        for sec in sections:
            rc.section(sec)  # run dataclass validation now
        return rc

    def section(self, name: str):
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(name + ".")}
        try:
            return SECTIONS[name](**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from exc

    def to_kv(self) -> dict:
        return {k: v for k, v in self.values.items() if v is not None}


def describe(command: str) -> str:
    """Key listing with defaults, for ``--help``."""
    lines = ["configuration keys (set with --set key=value):"]
    for sec in COMMAND_SECTIONS[command]:
        for name, f in _fields(sec).items():
            v = default_value(f)
            lines.append(f"  {sec}.{name} = {'unset' if v is None else repr(v)}")
    return "\n".join(lines)
