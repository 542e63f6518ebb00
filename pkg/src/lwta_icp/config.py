"""Training configuration and its flat ``key = value`` text form.

The text form is a flat TOML document, so ``defaults`` output can be fed
straight back in with ``--config``.
"""

import dataclasses
import json
from dataclasses import dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import AugmentFlags
from .errors import ConfigError
from .icp import IcpCoefficients

ARCH_PRESETS = ("mlp-tiny", "cnn-mini")
WINNER_MODES = ("stochastic", "max")


@dataclass
class TrainConfig:
    preset: str = "mlp-tiny"
    dataset: str = "blobs"
    seed: int = 0
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    tau_prior: float = 0.5
    tau_post: float = 0.67
    omega: float = 1.0
    u: int = 2
    winner: str = "stochastic"
    zeta_dim: int = 16
    y_dim: int = 16
    aux_blocks: int = 8
    test_fraction: float = 0.2
    augment_crop: bool = False
    augment_flip: bool = False
    threshold: float = 0.001
    n_samples: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.tau_prior <= 0 or self.tau_post <= 0:
            raise ConfigError("temperatures must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (negative pairs)")
        if self.u not in (2, 4):
            raise ConfigError(f"u must be 2 or 4, got {self.u}")
        if self.preset not in ARCH_PRESETS:
            raise ConfigError(f"unknown architecture preset {self.preset!r}; expected one of {ARCH_PRESETS}")
        if self.winner not in WINNER_MODES:
            raise ConfigError(f"unknown winner mode {self.winner!r}; expected one of {WINNER_MODES}")
        if self.omega <= 0:
            raise ConfigError("omega must be positive")
        if self.epochs < 0 or self.n_samples < 1:
            raise ConfigError("epochs must be >= 0 and n_samples >= 1")
        if not 0 <= self.threshold < 1:
            raise ConfigError("threshold must lie in [0, 1)")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("alpha, beta and gamma must be nonnegative")

    @property
    def coeffs(self):
        return IcpCoefficients(self.alpha, self.beta, self.gamma)

    @property
    def augment(self):
        return AugmentFlags(crop=self.augment_crop, flip=self.augment_flip)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_toml(self):
        return "".join(f"{f.name} = {_toml_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_toml(cls, text):
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for name, value in raw.items():
            kind = type(getattr(cls(), name))
            if kind is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                raise ConfigError(f"config key {name!r} expects {kind.__name__}, got {value!r}")
            values[name] = value
        return cls(**values)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_toml(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)
