"""Training configuration and its flat ``key=value`` file format."""
import dataclasses
from dataclasses import dataclass, field
from typing import Tuple

from rbdm.errors import ConfigError


@dataclass
class TrainConfig:
    T: int = 500
    sample_steps: int = 5
    epochs: int = 40
    batch: int = 2
    lr: float = 1e-4
    image_size: int = 256
    ssr: bool = True
    rr: bool = True
    w2: float = 1.0
    w3: float = 1.0
    seed: int = 0
    channels: Tuple[int, int, int] = (32, 64, 128)
    encoder_hidden: int = 64
    max_steps: int = 0  # 0: run all epochs
    checkpoint_every: int = 0  # 0: once per epoch
    manifest: str = ""
    out_dir: str = "run"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.sample_steps < 1 or self.T % self.sample_steps:
            raise ConfigError(f"sample_steps={self.sample_steps} must divide T={self.T}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"channels needs three positive widths, got {self.channels}")
        if self.image_size % 4:
            raise ConfigError(f"image_size must be divisible by 4, got {self.image_size}")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("max_steps and checkpoint_every must be >= 0")

    @property
    def stride(self):
        return self.T // self.sample_steps

    @classmethod
    def full(cls, **overrides):
        """256x256 images, T=500, 5 sampling steps, 40 epochs, Adam 1e-4, batch 2."""
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        """Laptop-scale preset: 64x64, T=100 (stride 20), halved channels,
        2000 steps of batch 6 at lr 1e-3."""
        base = dict(T=100, sample_steps=5, image_size=64, channels=(16, 32, 64),
                    max_steps=2000, lr=1e-3, batch=6)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {"full": TrainConfig.full, "desk": TrainConfig.desk}


def _parse_value(name, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if name == "channels":
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


_KINDS = {"T": int, "sample_steps": int, "epochs": int, "batch": int, "lr": float,
          "image_size": int, "ssr": bool, "rr": bool, "w2": float, "w3": float, "seed": int,
          "channels": tuple, "encoder_hidden": int, "max_steps": int, "checkpoint_every": int,
          "manifest": str, "out_dir": str}


def parse_config(text):
    """Parse ``key=value`` lines. A ``preset`` key (full or desk) selects
    the defaults the remaining keys override; unknown keys are errors."""
    values = {}
    preset = "full"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {value!r}")
            preset = value
            continue
        if key not in _KINDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value, _KINDS[key])
    return PRESETS[preset](**values)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg):
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
