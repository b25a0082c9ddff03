"""Strict JSON configuration for the end-to-end pipeline.

Every section is a dataclass; unknown keys anywhere raise
:class:`ConfigError` naming the dotted path of the key.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .n2n import NetDescriptor, TrainConfig
from .phantom import MotionSpec, NoiseSpec, PhantomSpec
from .prefilter import PrefilterParams
from .registration import RegistrationParams

__all__ = [
    "ConfigError",
    "PhantomSection",
    "TemplateSection",
    "PairSection",
    "NetworkSection",
    "TrainSection",
    "MetricSection",
    "PipelineConfig",
    "load_config",
    "parse_config",
    "config_to_dict",
]

BASELINES = ("affine_average", "nlm", "affine_n2n")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSection:
    subjects: int = 2
    repeats: int = 3
    dims: tuple = (96, 96, 32)
    spacing: tuple = (1.0, 1.0, 2.0)
    layers: int = 6
    vessel_count: int = 20
    motion_amplitude: float = 3.0
    motion_smoothness: float = 8.0
    noise_model: str = "gaussian"
    noise_sigma: float = 0.1
    speckle_shape: float = 4.0

    def __post_init__(self):
        if self.subjects < 1:
            raise ConfigError("phantom.subjects must be >= 1")
        if self.repeats < 2:
            raise ConfigError("phantom.repeats must be >= 2")
        if len(self.dims) != 3 or len(self.spacing) != 3:
            raise ConfigError("phantom.dims and phantom.spacing need three entries")

    def specs(self, subject_seed):
        """Phantom, motion and noise specs for one subject."""
        ph = PhantomSpec(
            dims=tuple(int(n) for n in self.dims),
            spacing=tuple(float(s) for s in self.spacing),
            layers=self.layers,
            vessel_count=self.vessel_count,
            seed=subject_seed[0],
        )
        mo = MotionSpec(self.motion_amplitude, self.motion_smoothness, seed=subject_seed[1])
        no = NoiseSpec(self.noise_model, self.noise_sigma, self.speckle_shape, seed=subject_seed[2])
        return ph, mo, no


@dataclass(frozen=True)
class TemplateSection:
    outer_iters: int = 3

    def __post_init__(self):
        if self.outer_iters < 0:
            raise ConfigError("template.outer_iters must be >= 0")


@dataclass(frozen=True)
class PairSection:
    crop: int = 128

    def __post_init__(self):
        if self.crop < 1:
            raise ConfigError("pairs.crop must be >= 1")


@dataclass(frozen=True)
class NetworkSection:
    depth: int = 2
    channels: tuple = (16, 32)
    init: str = "identity"

    def descriptor(self):
        return NetDescriptor(self.depth, tuple(self.channels))


@dataclass(frozen=True)
class TrainSection:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    seed: int | None = None  # None -> global seed

    def train_config(self, global_seed):
        return TrainConfig(
            self.lr, self.beta1, self.beta2, self.eps, self.batch_size, self.epochs,
            global_seed if self.seed is None else self.seed,
        )


@dataclass(frozen=True)
class MetricSection:
    patch: int = 8
    tau: float = 0.5
    window: int = 8
    peak: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str = "run"
    seed: int = 0
    threads: int = 1
    phantom: PhantomSection | None = field(default_factory=PhantomSection)
    inputs: list | None = None  # list of subjects, each a list of .mhd repeat paths
    prefilter: PrefilterParams = field(default_factory=PrefilterParams)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    template: TemplateSection = field(default_factory=TemplateSection)
    pairs: PairSection = field(default_factory=PairSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricSection = field(default_factory=MetricSection)
    baselines: tuple = BASELINES

    def __post_init__(self):
        if self.phantom is None and not self.inputs:
            raise ConfigError("either a phantom section or input paths are required")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        unknown = [b for b in self.baselines if b not in BASELINES]
        if unknown:
            raise ConfigError(f"unknown baseline(s) {unknown}; choose from {list(BASELINES)}")


# ---------------------------------------------------------------------------
# strict parsing


def _strip_optional(tp):
    args = typing.get_args(tp)
    if type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0] if len(rest) == 1 else tp, True
    return tp, False


def _convert(value, tp, path):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp) or tp
    if origin is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if origin is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if origin is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if origin is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin in (tuple, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value) if origin is tuple else list(value)
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")
    kwargs = {k: _convert(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def parse_config(data):
    """Build a :class:`PipelineConfig` from a parsed JSON object."""
    return _build(PipelineConfig, data, "")


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def config_to_dict(cfg):
    """JSON-ready view of a config (tuples become lists)."""
    def plain(x):
        if dataclasses.is_dataclass(x):
            return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return plain(cfg)
