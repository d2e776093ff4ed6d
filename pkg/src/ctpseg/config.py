"""Training configuration: defaults, learning-rate schedule, flat-file round trip."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

WIRINGS = ("cta_only", "f_o_only", "pseudo_dwi_full", "f_o_plus_pseudo", "real_dwi")
MODES = ("end_to_end", "staged")


@dataclass(frozen=True)
class TrainConfig:
    """Full training recipe; defaults reproduce the reference setup."""

    batch_size: int = 5
    epochs: int = 300
    lr: float = 0.002
    lr_decay_epoch: int = 180
    lr_decay_factor: float = 0.2
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    synth_weight: float = 1.0
    extract_weight: float = 1.0
    context_weight: float = 1.2
    fg_weight: float = 1.5
    dist_scale: float = 50.0
    n_frames: int = 6
    rise_run: int = 5
    crop_size: tuple[int, int] = (256, 256)
    base_ch: int = 32
    depth: int = 4
    wiring: str = "pseudo_dwi_full"
    mode: str = "end_to_end"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.crop_size, list):
            object.__setattr__(self, "crop_size", tuple(self.crop_size))
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("lr and lr_decay_factor must be positive")
        if not (0 < self.lr_decay_epoch < self.epochs):
            raise ConfigError(
                f"lr_decay_epoch must lie in (0, epochs); got {self.lr_decay_epoch} "
                f"with epochs={self.epochs}"
            )
        if self.wiring not in WIRINGS:
            raise ConfigError(f"wiring must be one of {WIRINGS}, got {self.wiring!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_frames < 2:
            raise ConfigError("n_frames must be >= 2")
        if (
            len(self.crop_size) != 2
            or any(c < 1 for c in self.crop_size)
            or any(c % 2**self.depth for c in self.crop_size)
        ):
            raise ConfigError(
                f"crop_size must be a positive pair divisible by {2**self.depth}, "
                f"got {self.crop_size}"
            )

    def lr_at_epoch(self, epoch: int) -> float:
        """Learning rate for a 1-indexed epoch: decays once past lr_decay_epoch."""
        if epoch < 1:
            raise ConfigError(f"epoch is 1-indexed, got {epoch}")
        if epoch > self.lr_decay_epoch:
            return self.lr * self.lr_decay_factor
        return self.lr

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dump(self) -> str:
        """key=value lines, one field per line, parseable by TrainConfig.parse."""
        lines = []
        for key, value in self.as_dict().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, **overrides) -> "TrainConfig":
        """Inverse of dump; unknown keys and malformed lines are errors.

        Keyword overrides win over file values.
        """
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        return cls.parse(path.read_text(encoding="utf-8"), **overrides)


def _coerce(key: str, raw: str, type_name: str):
    try:
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        if type_name == "str":
            return raw
        if type_name.startswith("tuple"):
            return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unsupported config field type {type_name!r} for {key!r}")
