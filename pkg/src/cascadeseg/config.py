"""Training configuration and its JSON file form.

The config file mirrors :class:`TrainConfig` key for key, optionally plus
``data_dir``/``val_dir``/``out_dir``. Unknown keys are rejected so typos
fail loudly. ``resolve_config`` produces the fully explicit dict that gets
echoed next to the training outputs; that echo is itself a valid input.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError


@dataclass
class TrainConfig:
    stages: int = 4
    fusion_mode: str = "cifs"  # cifs | concat_input (stages >= 2)
    deep_supervision: bool = True
    alphas: tuple = (0.7, 0.8, 0.9, 1.0)
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 120
    threshold: float = 0.7
    input_size: tuple = (224, 160)  # (width, height)
    levels: int = 4
    channel_widths: tuple = (16, 32, 64, 128, 256)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_range_deg: tuple = (-25.0, 25.0)
    seed: int = 0

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.channel_widths = tuple(int(c) for c in self.channel_widths)
        self.rotation_range_deg = tuple(float(a) for a in self.rotation_range_deg)
        self.validate()

    def validate(self):
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.stages > 1 and self.fusion_mode not in ("cifs", "concat_input"):
            raise ConfigError("fusion_mode must be 'cifs' or 'concat_input'")
        if len(self.alphas) != self.stages:
            raise ConfigError(
                f"alphas needs one weight per stage ({self.stages}), got {len(self.alphas)}"
            )
        if any(a <= 0 for a in self.alphas):
            raise ConfigError("alphas must be strictly positive")
        if self.alphas[-1] != max(self.alphas):
            raise ConfigError("the last alpha must be the maximum")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if len(self.rotation_range_deg) != 2 or self.rotation_range_deg[0] != -self.rotation_range_deg[1]:
            raise ConfigError("rotation_range_deg must be symmetric (-a, a)")
        if not 0.0 <= self.hflip_prob <= 1.0 or not 0.0 <= self.vflip_prob <= 1.0:
            raise ConfigError("flip probabilities must lie in [0, 1]")
        if self.levels < 1 or len(self.channel_widths) != self.levels + 1:
            raise ConfigError("channel_widths needs levels+1 entries")
        w, h = self.input_size
        div = 2 ** self.levels
        if w <= 0 or h <= 0 or w % div or h % div:
            raise ConfigError(
                f"input_size {w}x{h} must be positive and divisible by 2^levels = {div}"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def to_dict(self):
        d = asdict(self)
        for key in ("alphas", "input_size", "channel_widths", "rotation_range_deg"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PATH_KEYS = ("data_dir", "val_dir", "out_dir")


def load_config_file(path):
    """Read and split a config JSON into (TrainConfig kwargs, path entries)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    paths = {k: raw.pop(k) for k in PATH_KEYS if k in raw}
    return raw, paths


def resolve_config(file_kwargs, file_paths, cli_paths):
    """Merge file + CLI into a TrainConfig and explicit path map.

    CLI paths win over file paths. The returned dict spells out every key.
    """
    config = TrainConfig.from_dict(file_kwargs)
    paths = dict(file_paths)
    for key, value in cli_paths.items():
        if value is not None:
            paths[key] = value
    resolved = config.to_dict()
    for key in PATH_KEYS:
        if key in paths and paths[key] is not None:
            resolved[key] = str(paths[key])
    return config, paths, resolved
