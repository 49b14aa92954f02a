"""Run configuration: every module's settings in one JSON document."""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from enhancement import EnhanceParams
from errors import ConfigError
from losses import LossConfig
from nets import DiscriminatorConfig, GeneratorConfig, UNetConfig
from training import OptimizerConfig, PretrainConfig, SweepConfig, TrainSegConfig
from volume_io import PhantomSpec

# =========================
# CONFIG
# =========================

RUN_ROOT = os.environ.get("GANSEG_RUN_ROOT")
CONFIG_FILE = os.environ.get("GANSEG_CONFIG", "run_config.json")
RESOLVED_CONFIG = "config.json"

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}

SECTIONS = (
    "phantom", "enhance", "unet", "generator", "discriminator", "optimizer",
    "pretrain_optimizer", "pretrain", "train_seg", "sweep", "loss",
)


def _pretrain_optimizer():
    return OptimizerConfig(epochs=10)


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    enhance: EnhanceParams = field(default_factory=EnhanceParams)
    unet: UNetConfig = field(default_factory=UNetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    pretrain_optimizer: OptimizerConfig = field(default_factory=_pretrain_optimizer)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train_seg: TrainSegConfig = field(default_factory=TrainSegConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    output_dir: str = "runs"
    slice_size: tuple = (64, 64)
    precision: str = "float32"
    deterministic: bool = True
    enhance_inputs: bool = False
    test_fraction: float = 0.2

    def validate(self):
        for name in self.section_names():
            getattr(self, name).validate()
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if len(self.slice_size) != 2 or min(self.slice_size) < 5:
            raise ConfigError(f"slice_size must be two sizes >= 5, got {self.slice_size}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.generator.in_channels != self.unet.in_channels:
            raise ConfigError("generator and segmenter must take the same number of modalities")
        return self

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @classmethod
    def section_names(cls):
        return [f.name for f in fields(cls) if _is_section(f)]

    def to_dict(self):
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data):
        """Merge a (possibly partial) mapping over the defaults; unknown keys are errors."""
        defaults = cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

        values = {}
        for f in fields(cls):
            default = getattr(defaults, f.name)
            if f.name not in data:
                values[f.name] = default
            elif _is_section(f):
                values[f.name] = _merge_section(f.name, default, data[f.name])
            else:
                values[f.name] = _coerce(default, data[f.name])
        return cls(**values)

    @classmethod
    def load(cls, path=None):
        path = Path(path or CONFIG_FILE)
        if not path.exists():
            if path == Path(CONFIG_FILE):
                return cls().validate()
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                data = json.load(f)
        except (json.JSONDecodeError, ValueError) as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data).validate()

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _is_section(f):
    return f.name in SECTIONS


def _merge_section(name, default, overrides):
    if not isinstance(overrides, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    base = asdict(default)
    unknown = sorted(set(overrides) - set(base))
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {', '.join(unknown)}")
    merged = {k: _coerce(base[k], overrides.get(k, base[k])) for k in base}
    return type(default)(**merged)


def _coerce(default, value):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def resolve_run_dir(path):
    """Relative run directories live under GANSEG_RUN_ROOT when it is set."""
    path = Path(path)
    if RUN_ROOT and not path.is_absolute():
        return Path(RUN_ROOT) / path
    return path
