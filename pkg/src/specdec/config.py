"""Run configuration file: one JSON object with per-subsystem sections.

Sections: base_model, speculator, train, base_train, bench, corpus. Every
key must match a known field; unknown keys are rejected rather than
silently ignored.
"""

import dataclasses
import json
from pathlib import Path
from typing import Optional, Union

from .bench import BenchConfig
from .corpus import SyntheticCorpusSpec
from .errors import ConfigError
from .model import BaseModelConfig
from .speculator import SpeculatorConfig
from .training import BaseTrainConfig, TrainConfig


@dataclasses.dataclass(frozen=True)
class CorpusConfig:
    kind: str = "synthetic"
    seed: int = 0
    pattern_order: int = 3
    determinism: float = 0.9
    alphabet_size: int = 16
    n_tokens: int = 400_000
    paths: tuple = ()
    truncation: int = 0
    split_lines: bool = False

    def __post_init__(self):
        if self.kind not in ("synthetic", "files"):
            raise ConfigError(f"corpus kind must be synthetic|files, "
                              f"got {self.kind!r}")
        if self.kind == "files" and not self.paths:
            raise ConfigError("corpus kind 'files' requires paths")

    def synthetic_spec(self) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(seed=self.seed,
                                   pattern_order=self.pattern_order,
                                   determinism=self.determinism,
                                   alphabet_size=self.alphabet_size)


_SECTIONS = {
    "base_model": BaseModelConfig,
    "speculator": SpeculatorConfig,
    "train": TrainConfig,
    "base_train": BaseTrainConfig,
    "bench": BenchConfig,
    "corpus": CorpusConfig,
}


@dataclasses.dataclass
class RunConfig:
    base_model: BaseModelConfig = dataclasses.field(default_factory=BaseModelConfig)
    speculator: SpeculatorConfig = dataclasses.field(default_factory=SpeculatorConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    base_train: BaseTrainConfig = dataclasses.field(default_factory=BaseTrainConfig)
    bench: BenchConfig = dataclasses.field(default_factory=BenchConfig)
    corpus: CorpusConfig = dataclasses.field(default_factory=CorpusConfig)


def _build_section(cls, name: str, data: dict):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: "
                          f"{sorted(unknown)}")
    converted = {k: tuple(v) if isinstance(v, list) else v
                 for k, v in data.items()}
    return cls(**converted)


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Parse a config file; missing file/sections fall back to defaults."""
    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"section {name!r} must be an object")
            kwargs[name] = _build_section(cls, name, raw[name])
    return RunConfig(**kwargs)
