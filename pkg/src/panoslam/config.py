"""Run configuration stored as a flat ``key = value`` text file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .depth_refine import DENSIFY_METHODS, PsoConfig
from .errors import ConfigurationError, DatasetError

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False, "on": True, "off": False}


@dataclass
class RunConfig:
    dataset: str = ""
    theta: float = 2.0
    densification: str = "pano_dars"
    association: bool = True
    loop_closing: bool = True
    # swarm search
    pso_swarm_size: int = 24
    pso_iterations: int = 40
    pso_inertia: float = 0.72
    pso_cognitive: float = 1.49
    pso_social: float = 1.49
    pso_search_halfwidth: float = 0.5
    pso_warm_start: bool = False
    # seeds
    seed: int = 0
    predictor_seed: int = 0
    # toy predictor
    predictor_channels: int = 16
    predictor_distortion: float = 0.06
    predictor_bias: float = 1.0
    # tracking / mapping
    keyframe_ratio: float = 0.9
    keyframe_gap: int = 10
    local_window: int = 5
    lba_window: int = 6
    lba_fixed: int = 2
    lba_iterations: int = 10
    # loop closing
    loop_min_shared: int = 30
    loop_min_separation: int = 50
    loop_max_distance: float = 25.0
    loop_weight: float = 100.0
    loop_scale_information: float = 1e4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.densification not in DENSIFY_METHODS:
            raise ConfigurationError(
                f"densification must be one of {DENSIFY_METHODS}, got {self.densification!r}"
            )
        if self.association and not self.theta > 0:
            raise ConfigurationError("theta must be positive when depth association is on")
        if self.lba_window < 2 or self.lba_fixed < 1:
            raise ConfigurationError("lba_window must be >= 2 and lba_fixed >= 1")
        self.pso_config()

    def pso_config(self) -> PsoConfig:
        return PsoConfig(self.pso_swarm_size, self.pso_iterations, self.pso_inertia, self.pso_cognitive,
                         self.pso_social, self.seed, self.pso_search_halfwidth)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = ["# panoslam run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, path="<config>"):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DatasetError(path, "expected 'key = value'", lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise DatasetError(path, f"unknown key {key!r}", lineno)
            try:
                values[key] = _parse(types[key], value)
            except ValueError:
                raise DatasetError(path, f"bad value {value!r} for {key}", lineno) from None
        try:
            return cls(**values)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None

    def save(self, path):
        try:
            Path(path).write_text(self.to_text())
        except OSError as exc:
            raise DatasetError(path, f"cannot write: {exc.strerror}") from exc

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise DatasetError(path, "no such config file") from None
        except OSError as exc:
            raise DatasetError(path, f"cannot read: {exc.strerror}") from exc
        return cls.from_text(text, path)


def _parse(type_name, value):
    if type_name in ("bool", bool):
        key = value.lower()
        if key not in _BOOL:
            raise ValueError(value)
        return _BOOL[key]
    if type_name in ("int", int):
        return int(value)
    if type_name in ("float", float):
        return float(value)
    return value
