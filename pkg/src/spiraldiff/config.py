"""Run configuration: strict INI-style ``key = value`` files with sections."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
import io
from pathlib import Path

from .nnet import ModelConfig
from .train import TrainConfig


@dataclass
class ScheduleConfig:
    T: int = 200
    s: float = 1e-4
    # "auto" resolves to the square root of the first posterior variance
    sigma0: str = "auto"


@dataclass
class SampleConfig:
    S: int = 10
    clamp: bool = True
    seed: int = 0
    log_timing: bool = False


@dataclass
class DataConfig:
    task: str = ""
    train: str = ""
    valid: str = ""
    test: str = ""
    vocab: str = ""
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def __post_init__(self):
        if self.model.T != self.schedule.T:
            raise ValueError(f"model.T={self.model.T} and schedule.T={self.schedule.T} disagree")
        if self.schedule.sigma0 != "auto":
            try:
                if float(self.schedule.sigma0) < 0:
                    raise ValueError
            except ValueError:
                raise ValueError(f"sigma0 must be 'auto' or a non-negative number, got {self.schedule.sigma0!r}")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name, values in self.to_dict().items():
            parser[name] = {k: _fmt(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
}

# Desk-scale task presets: condition length, target length, batch size, steps, lr.
PRESETS = {
    "copy": dict(k_c=16, k_x=16, batch_size=64, steps=3000, lr=1e-3),
    "reverse": dict(k_c=16, k_x=16, batch_size=64, steps=3000, lr=1e-3),
    "sort": dict(k_c=16, k_x=16, batch_size=64, steps=3000, lr=1e-3),
    "lookup": dict(k_c=16, k_x=16, batch_size=64, steps=3000, lr=1e-3),
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(section: str, key: str, raw: str, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "str": str, "bool": bool}[typ]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse config text; unknown sections or keys are errors.

    When ``[data] task`` names a preset, its values fill in any key the file
    does not set explicitly.
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from None
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        types = {f.name: f.type for f in fields(SECTIONS[section])}
        for key, raw in parser[section].items():
            if key not in types:
                raise ValueError(f"unknown config key [{section}] {key}")
            values[section][key] = _convert(section, key, raw, types[key])
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        types = {f.name: f.type for f in fields(SECTIONS[section])} if section in SECTIONS else {}
        if key not in types:
            raise ValueError(f"unknown config key {dotted}")
        if isinstance(value, str):
            value = _convert(section, key, value, types[key])
        values[section][key] = value

    task = values["data"].get("task", "")
    if task:
        if task not in PRESETS:
            raise ValueError(f"unknown task preset {task!r}; expected one of {sorted(PRESETS)}")
        for key, value in PRESETS[task].items():
            section = "model" if key in ("k_c", "k_x") else "train"
            values[section].setdefault(key, value)
    if "T" in values["schedule"] and "T" not in values["model"]:
        values["model"]["T"] = values["schedule"]["T"]
    elif "T" in values["model"] and "T" not in values["schedule"]:
        values["schedule"]["T"] = values["model"]["T"]
    return RunConfig(**{name: SECTIONS[name](**values[name]) for name in SECTIONS})


def load_config(path, overrides: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides)
