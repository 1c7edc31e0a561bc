"""Run configuration: presets, JSON files, flag overrides and the persisted effective config.

A config file is a JSON object with any subset of the sections below; values
missing from the file come from the chosen preset::

    {
      "preset": "desk",
      "model":    {"base_width": 16, "depth": 4, "input_size": [64, 64], ...},
      "pretrain": {"epochs": 8, "lr_initial": 0.001, "lr_halving_period": 10, ...},
      "adapt":    {"lr_adversary": 1e-06, "grl_constant": 1.4, "margin": {"gamma": 0.08},
                   "early_stop_threshold": 0.02, "freeze_spec": ["encoder.0", "encoder.1"], ...},
      "data":     {"n_source": 48, "n_target": 48, "n_eval": 8, "depth": 12,
                   "geometry_seed": 0, "shift": {...}, "source": null, "target": null,
                   "eval": null},
      "seeds": [0, 1, 2, 3, 4],
      "out": "runs/desk"
    }

``data.source``/``data.target``/``data.eval`` name dataset directories; when
they are null the synthetic generator is used with ``data.shift``.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .adaptation import AdaptConfig, PretrainConfig
from .data import DomainShiftSpec, InvalidSpecError
from .model import InvalidConfigError, UNetConfig

SEED_ENV = "MDDLAB_SEED"
PRESETS = ("desk", "full")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_source: int = 48
    n_target: int = 48
    n_eval: int = 8
    depth: int = 12
    geometry_seed: int = 0
    shift: DomainShiftSpec = field(default_factory=DomainShiftSpec.desk)
    source: str | None = None
    target: str | None = None
    eval: str | None = None  # labelled target split for evaluation

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = DomainShiftSpec(**self.shift)


@dataclass
class RunConfig:
    model: UNetConfig = field(default_factory=UNetConfig.desk)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    preset: str = "desk"

    def validate(self, check_paths=True):
        try:
            self.model.validate()
            self.pretrain.validate()
            self.adapt.validate()
            self.data.shift.validate()
        except (InvalidConfigError, InvalidSpecError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if min(self.data.n_source, self.data.n_target, self.data.n_eval, self.data.depth) < 1:
            raise ConfigError("dataset counts must be >= 1")
        if check_paths:
            for name in ("source", "target", "eval"):
                p = getattr(self.data, name)
                if p is not None and not Path(p).is_dir():
                    raise ConfigError(f"data.{name}: {p} is not a directory")
            parent = Path(self.out).resolve().parent
            while not parent.exists():
                parent = parent.parent
            if not os.access(parent, os.W_OK):
                raise ConfigError(f"output directory {self.out} is not creatable")
        return self

    @property
    def seed(self):
        return self.seeds[0]

    def for_seed(self, seed):
        """Copy with every component seeded from ``seed``."""
        cfg = copy.deepcopy(self)
        cfg.seeds = [int(seed)]
        cfg.pretrain.seed = int(seed)
        cfg.adapt.seed = int(seed)
        cfg.data.geometry_seed = int(seed)
        cfg.data.shift.seed = int(seed)
        return cfg

    def to_dict(self):
        return {
            "preset": self.preset,
            "model": {**asdict(self.model), "input_size": list(self.model.input_size)},
            "pretrain": asdict(self.pretrain),
            "adapt": self.adapt.to_dict(),
            "data": asdict(self.data),
            "seeds": list(self.seeds),
            "out": str(self.out),
        }


def preset(name="desk"):
    """Named profiles. ``desk`` is the laptop-scale benchmark; ``full`` the full-size model."""
    if name == "desk":
        return RunConfig(model=UNetConfig.desk(), pretrain=PretrainConfig(epochs=8),
                         adapt=AdaptConfig(max_epochs=20, batch_size=16),
                         seeds=[0, 1, 2, 3, 4], preset="desk")
    if name == "full":
        return RunConfig(model=UNetConfig(), pretrain=PretrainConfig(epochs=60),
                         adapt=AdaptConfig(max_epochs=60),
                         seeds=[0, 1, 2, 3, 4, 5], preset="full")
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")


def _merge(obj, values, where):
    """Return a copy of dataclass ``obj`` with ``values`` applied, recursing into sections."""
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for f in fields(obj):
        cur = getattr(obj, f.name)
        if f.name not in values:
            kw[f.name] = copy.deepcopy(cur)
        elif hasattr(cur, "__dataclass_fields__") and isinstance(values[f.name], dict):
            kw[f.name] = _merge(cur, values[f.name], f"{where}.{f.name}")
        else:
            kw[f.name] = copy.deepcopy(values[f.name])
    try:
        out = type(obj)(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    if isinstance(out, UNetConfig):
        out.input_size = tuple(out.input_size)
    return out


def from_dict(values, base: RunConfig | None = None):
    values = dict(values)
    name = values.pop("preset", None)
    if base is None:
        base = preset(name or "desk")
    elif name is not None and name != base.preset:
        base = preset(name)
    return _merge(base, values, "config")


def load(path=None, preset_name=None, overrides=None):
    """Preset, then file values, then ``overrides`` (flags), then ``MDDLAB_SEED``."""
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    name = preset_name or values.get("preset", "desk")
    values["preset"] = name
    cfg = from_dict(values, preset(name))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "seed":
            cfg.seeds = [int(val)]
        elif key == "out":
            cfg.out = str(val)
        else:
            section, _, attr = key.partition(".")
            cfg = from_dict({section: {attr: val}}, cfg)
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            cfg.seeds = [int(env)]
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return cfg


def save(cfg: RunConfig, out_dir, name="config.json"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
