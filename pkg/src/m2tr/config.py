"""Run configuration shared by the model, the trainer and the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from m2tr.errors import ConfigError


@dataclass
class Config:
    image_size: int = 64
    stem_channels: int = 32
    feature_dim: int = 128
    n_stack: int = 4
    patch_sides: tuple[int, ...] = (16, 8, 4, 2)
    lambda_seg: float = 1.0
    lambda_con: float = 0.001
    lr: float = 1e-4
    lr_decay_every: int = 40
    lr_decay_factor: float = 0.1
    batch_size: int = 24
    epochs: int = 90
    seed: int = 0
    ablate_mt: bool = False
    ablate_ff: bool = False
    ablate_cmf: bool = False
    attention_scale: str = "paper"
    cmf_query_source: str = "rgb"
    frames_per_clip: int = 16
    stem_norm: str = "batch"

    def __post_init__(self):
        self.patch_sides = tuple(int(r) for r in self.patch_sides)
        self.validate()

    def validate(self) -> None:
        positive = ("image_size", "stem_channels", "feature_dim", "n_stack", "lr",
                    "lr_decay_every", "lr_decay_factor", "batch_size", "epochs", "frames_per_clip")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lambda_seg < 0 or self.lambda_con < 0:
            raise ConfigError("loss weights must be nonnegative")
        # stem reduces by 4, the head by a further 4
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.stem_channels % 2:
            raise ConfigError("stem_channels must be even")
        grid = self.image_size // 4
        if not self.patch_sides:
            raise ConfigError("patch_sides is empty")
        for r in self.patch_sides:
            if r <= 0 or grid % r:
                raise ConfigError(f"patch side {r} does not divide the feature grid {grid}")
        if self.attention_scale not in ("paper", "sqrt_dim"):
            raise ConfigError(f"attention_scale must be 'paper' or 'sqrt_dim', got {self.attention_scale!r}")
        if self.cmf_query_source not in ("rgb", "freq"):
            raise ConfigError(f"cmf_query_source must be 'rgb' or 'freq', got {self.cmf_query_source!r}")
        if self.stem_norm not in ("batch", "none"):
            raise ConfigError(f"stem_norm must be 'batch' or 'none', got {self.stem_norm!r}")

    @property
    def grid(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch_sides"] = list(self.patch_sides)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "Config":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


@dataclass
class SplitSizes:
    n_real: int
    n_fake: int


@dataclass
class DeskPreset:
    """Minutes-scale CPU preset: 64x64 images, 2000/400/400 samples, 10 epochs."""

    # trained from scratch, so a higher rate than the pretrained-backbone default
    config: Config = field(default_factory=lambda: Config(epochs=10, seed=7, lr=5e-4))
    train: SplitSizes = field(default_factory=lambda: SplitSizes(1000, 1000))
    val: SplitSizes = field(default_factory=lambda: SplitSizes(200, 200))
    test: SplitSizes = field(default_factory=lambda: SplitSizes(200, 200))

    def split_sizes(self) -> dict[str, tuple[int, int]]:
        return {name: (s.n_real, s.n_fake) for name, s in (("train", self.train), ("val", self.val), ("test", self.test))}


def desk_preset() -> DeskPreset:
    return DeskPreset()


@dataclass
class OverfitPreset:
    """Capacity sanity check: 16 real and 16 fake samples memorized over 200 epochs."""

    # constant rate: the default step decay would leave 3e-7 by epoch 120
    config: Config = field(default_factory=lambda: Config(epochs=200, seed=7, lr=3e-4, lr_decay_every=200))
    train: SplitSizes = field(default_factory=lambda: SplitSizes(16, 16))
    target_loss: float = 0.05


def overfit_preset() -> OverfitPreset:
    return OverfitPreset()
