"""Run configuration: one JSON document covering every stage.

Sections: schedule, denoiser, encoder, train, sample, data, plus a top-level
seed. Unknown keys are rejected by name. The schedule section carries the
sampling defaults (steps, eta, formula); an absent sample section inherits
them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .denoiser import DenoiserConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .pipeline import SampleConfig, TrainConfig
from .schedule import FORMULAS, DiffusionSchedule, linear_beta_schedule


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 20
    eta: float = 0.0
    formula: str = "standard"

    def __post_init__(self):
        if not 1 <= self.steps <= self.T:
            raise ConfigError(f"steps must be in [1, T={self.T}], got {self.steps}")
        if self.eta < 0.0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.formula not in FORMULAS:
            raise ConfigError(f"formula must be one of {FORMULAS}, got {self.formula!r}")

    def build(self) -> DiffusionSchedule:
        return linear_beta_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class DataConfig:
    """Synthesis defaults; cmd_synth flags override these."""

    mode: str = "rigid"
    n_points: int = 128
    overlap: float = 0.7
    noise: float = 0.005
    n_rbf: int = 4
    max_disp: float = 0.5

    def __post_init__(self):
        if self.mode not in ("rigid", "deform"):
            raise ConfigError(f"mode must be 'rigid' or 'deform', got {self.mode!r}")


@dataclass(frozen=True)
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0


_SECTIONS = {
    "schedule": ScheduleConfig,
    "denoiser": DenoiserConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "data": DataConfig,
}


def _build_section(cls, raw: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"config section {where!r}: unknown keys {unknown}")
    kwargs = dict(raw)
    if "adam_betas" in kwargs and isinstance(kwargs["adam_betas"], list):
        kwargs["adam_betas"] = tuple(kwargs["adam_betas"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config section {where!r}: {e}") from e


def run_config_from_dict(doc: dict) -> RunConfig:
    """Validate and build a RunConfig; lists every offending key by name."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config document must be an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"config: unknown top-level keys {unknown}")
    sections = {}
    for name, cls in _SECTIONS.items():
        raw = doc.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        if name == "sample":
            sched = sections["schedule"]
            raw = dict(raw)
            raw.setdefault("steps", sched.steps)
            raw.setdefault("eta", sched.eta)
            raw.setdefault("formula", sched.formula)
        sections[name] = _build_section(cls, raw, name)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"config: seed must be an integer, got {seed!r}")
    return RunConfig(seed=seed, **sections)


def run_config_to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["train"]["adam_betas"] = list(doc["train"]["adam_betas"])
    return doc


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    return run_config_from_dict(doc)
