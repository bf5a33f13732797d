"""Flat run configuration: "section.key = value" lines plus CLI overrides."""

import dataclasses
from dataclasses import dataclass, field

from .data import AugmentConfig, SceneSpec
from .errors import ConfigError
from .losses import LossWeights
from .model import VARIANTS
from .train import TrainConfig


@dataclass
class ModelConfig:
    variant: str = "full"
    n_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; "
                              f"choose from {sorted(VARIANTS)}")


@dataclass
class DataConfig:
    root: str = "data"
    width: int = 128
    height: int = 64
    count: int = 400
    seed: int = 0
    val_fraction: float = 0.2
    noise: float = 0.04

    def scene_spec(self):
        return SceneSpec(width=self.width, height=self.height,
                         noise=self.noise, seed=self.seed)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def set_option(self, dotted, raw):
        """Assign one 'section.key' from its string form, type-checked."""
        if "." not in dotted:
            raise ConfigError(f"option {dotted!r} must be section.key")
        section_name, key = dotted.split(".", 1)
        section = getattr(self, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section {section_name!r}")
        fields = {f.name: f for f in dataclasses.fields(section)}
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section {section_name!r}")
        setattr(section, key, _coerce(raw, getattr(section, key), dotted))
        # re-run the section's validation with the new value
        try:
            post = getattr(type(section), "__post_init__", None)
            if post:
                post(section)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"invalid value for {dotted}: {e}") from e

    def apply_text(self, text, origin="<config>"):
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
            dotted, raw = (part.strip() for part in line.split("=", 1))
            self.set_option(dotted, raw)
        return self

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls().apply_text(f.read(), origin=path)

    def to_text(self):
        """Echo every option, one per line, in file syntax."""
        lines = []
        for section_name in ("model", "data", "train", "loss", "augment"):
            section = getattr(self, section_name)
            for f in dataclasses.fields(section):
                value = getattr(section, f.name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                elif value is None:
                    value = "none"
                lines.append(f"{section_name}.{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _coerce(raw, current, dotted):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            elem = float if any(isinstance(v, float) for v in current) else int
            return tuple(elem(part) for part in raw.split(",") if part.strip())
        if current is None:  # optional ints (e.g. loss.ohem_min_kept)
            return None if raw.lower() == "none" else int(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"cannot parse value for {dotted}: {e}") from e
