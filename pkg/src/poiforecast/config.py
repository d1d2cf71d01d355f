"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .classifier import BASELINE, JOINT, TrainConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .prior import DistanceBucketing
from .projection import UtmZone

OUTPUT_DIR_ENV = "POIFORECAST_OUTPUT_DIR"
METHOD_CHOICES = {"joint": (JOINT,), "baseline": (BASELINE,), "both": (JOINT, BASELINE)}


@dataclass(frozen=True)
class PriorConfig:
    bucket_width_km: float = 0.5
    max_distance_km: float = 30.0
    smoothing_alpha: float = 1.0

    def __post_init__(self):
        if self.smoothing_alpha < 0:
            raise ConfigError("smoothing_alpha must be non-negative")
        self.bucketing()

    def bucketing(self) -> DistanceBucketing:
        return DistanceBucketing(self.bucket_width_km, self.max_distance_km)


@dataclass(frozen=True)
class SplitConfig:
    threshold: int | None = None
    target_unseen_ratio: float | None = 0.8
    tolerance: float = 0.05

    def __post_init__(self):
        if (self.threshold is None) == (self.target_unseen_ratio is None):
            raise ConfigError("split needs exactly one of 'threshold' or 'target_unseen_ratio'")
        if self.target_unseen_ratio is not None and not 0 < self.target_unseen_ratio < 1:
            raise ConfigError("target_unseen_ratio must lie in (0, 1)")


@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)

    def __post_init__(self):
        if not self.ratios or any(not 0 < r < 1 for r in self.ratios):
            raise ConfigError("sweep ratios must be a non-empty list of fractions in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    data_path: str = ""
    output_dir: str = "runs/default"
    zone: str | None = None
    candidates_path: str | None = None
    seed: int = 0
    methods: str = "both"
    k_values: tuple[int, ...] = (1, 5, 10, 20)
    deterministic: bool = True
    prior: PriorConfig = field(default_factory=PriorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.methods not in METHOD_CHOICES:
            raise ConfigError(f"methods must be one of {sorted(METHOD_CHOICES)}, got {self.methods!r}")
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ConfigError("k_values must be positive integers")
        if self.zone is not None:
            try:
                UtmZone.parse(self.zone)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    @property
    def method_names(self) -> tuple[str, ...]:
        return METHOD_CHOICES[self.methods]

    @property
    def utm_zone(self) -> UtmZone | None:
        return UtmZone.parse(self.zone) if self.zone else None

    def to_json(self) -> dict:
        return asdict(self)

    def identity(self) -> dict:
        """Everything that determines results; the output location is not part of it."""
        d = self.to_json()
        d.pop("output_dir")
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {"prior": PriorConfig, "encoder": EncoderConfig, "train": TrainConfig,
             "split": SplitConfig, "sweep": SweepConfig}
_TUPLES = {"k_values", "ratios"}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if k in _SECTIONS and cls is RunConfig:
            v = _build(_SECTIONS[k], v or {}, k)
        elif k in _TUPLES and v is not None:
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def config_from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values, "config")


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                assignments: list[str] = ()) -> RunConfig:
    """Config file, then the output-dir environment variable, then explicit overrides.

    ``assignments`` are ``section.key=value`` strings with JSON values.
    """
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    if os.environ.get(OUTPUT_DIR_ENV):
        values["output_dir"] = os.environ[OUTPUT_DIR_ENV]
    for a in assignments:
        key, sep, raw = a.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {a!r}")
        *parents, leaf = key.split(".")
        node = values
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _coerce(raw)
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        *parents, leaf = key.split(".")
        node = values
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    split = values.get("split", {})
    if "threshold" in split and split["threshold"] is not None and "target_unseen_ratio" not in split:
        split["target_unseen_ratio"] = None
    return config_from_dict(values)
