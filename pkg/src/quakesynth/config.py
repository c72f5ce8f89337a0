"""Pipeline configuration: one JSON document that fully specifies a run.

Every knob used by the other modules lives in a named section; unknown keys
anywhere in the document are rejected so typos fail loudly instead of
silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .geogen import GeoConfig
from .mifno import MifnoHyper
from .ddpm import DdpmHyper
from .waveprop import SimConfig


@dataclass
class DatasetSection:
    n: int = 512
    test_every: int = 8
    k_sensors: int = 8


@dataclass
class MetricsSection:
    bands: dict = field(default_factory=lambda: {
        "low": [0.0, 1.0], "mid": [1.0, 2.0], "high": [2.0, 5.0]})
    f_band: list = field(default_factory=lambda: [0.4, 5.0])
    n_freqs: int = 32
    w0: float = 6.0
    max_records: int = 32


@dataclass
class IoSection:
    out_dir: str = "runs"


@dataclass
class PipelineConfig:
    seed: int = 0
    geology: GeoConfig = field(default_factory=GeoConfig)
    simulation: SimConfig = field(default_factory=SimConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    mifno: MifnoHyper = field(default_factory=MifnoHyper)
    ddpm: DdpmHyper = field(default_factory=DdpmHyper)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    io: IoSection = field(default_factory=IoSection)


_SECTIONS = {
    "geology": GeoConfig,
    "simulation": SimConfig,
    "dataset": DatasetSection,
    "mifno": MifnoHyper,
    "ddpm": DdpmHyper,
    "metrics": MetricsSection,
    "io": IoSection,
}


def _apply(obj, values: dict, path: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        current = getattr(obj, key)
        if isinstance(current, tuple) and isinstance(val, list):
            val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
        if isinstance(current, bool) != isinstance(val, bool) and \
                isinstance(current, bool):
            raise ConfigError(f"config key '{path}.{key}' expects a boolean")
        setattr(obj, key, val)


def from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    cfg = PipelineConfig()
    for key, val in doc.items():
        if key == "seed":
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError("'seed' must be an integer")
            cfg.seed = val
        elif key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"section '{key}' must be a JSON object")
            _apply(getattr(cfg, key), val, key)
        else:
            raise ConfigError(f"unknown config section '{key}'")
    return cfg


def load(path) -> PipelineConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return from_dict(doc)


def to_dict(cfg: PipelineConfig) -> dict:
    out = {"seed": cfg.seed}
    for name in _SECTIONS:
        out[name] = dataclasses.asdict(getattr(cfg, name))
    return out
