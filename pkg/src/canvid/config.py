"""Flat key=value run configuration with typed validation.

The format is one `key = value` per line, `#` comments, no sections. Unknown
keys are hard errors so a config file can never silently drift from what the
code understands.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, asdict, fields

from .generation import AugmentConfig, GuidanceScales, SampleSettings
from .model import ModelConfig
from .training import TrainSettings


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, like) -> object:
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got '{raw}'")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def parse_flat(text: str, defaults: dict) -> dict:
    """Parse key=value lines into a dict typed like `defaults`."""
    out = dict(defaults)
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{body}'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        try:
            out[key] = _parse_value(raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from exc
    return out


def format_flat(values: dict) -> str:
    lines = []
    for key, val in values.items():
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


@dataclass
class RunConfig:
    """Model, training and sampling settings for the command-line tools."""

    # model
    height: int = 32
    width: int = 32
    channels: int = 1
    patch: int = 4
    dim: int = 128
    heads: int = 4
    temporal_layers: int = 2
    canvas_layers: int = 1
    spatial_layers: int = 2
    spatial_encoder_layers: int = 1
    flow_dim: int = 256
    flow_layers: int = 2
    flow_steps: int = 30
    group_size: int = 1
    max_frames: int = 32
    use_canvas: bool = True
    # training
    steps: int = 1000
    batch_size: int = 16
    clip_len: int = 2
    lr: float = 1e-3
    warmup_steps: int = 200
    canvas_weight: float = 1.0
    flow_weight: float = 1.0
    canvas_grad_to_temporal: bool = True
    checkpoint_every: int = 500
    log_every: int = 50
    seed: int = 0
    # sampling
    decode_steps: int = 6
    guidance_ws: float = 1.0
    guidance_wt: float = 1.0
    aug_r: float = 0.4
    aug_r_prime: float = 0.4

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})
        cfg.validate()
        return cfg

    def train_settings(self) -> TrainSettings:
        return TrainSettings(lr=self.lr, warmup_steps=self.warmup_steps,
                             canvas_weight=self.canvas_weight, flow_weight=self.flow_weight,
                             canvas_grad_to_temporal=self.canvas_grad_to_temporal)

    def sample_settings(self, group: int | None = None) -> SampleSettings:
        return SampleSettings(
            decode_steps=self.decode_steps,
            scales=GuidanceScales(self.guidance_ws, self.guidance_wt),
            aug=AugmentConfig(self.aug_r, self.aug_r_prime),
            group=self.group_size if group is None else group,
        )

    def validate(self) -> "RunConfig":
        self.model_config()
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.clip_len < 2:
            raise ConfigError("clip_len must be >= 2 (need at least one predicted frame)")
        if self.clip_len <= self.group_size:
            raise ConfigError("clip_len must exceed group_size")
        if not 1 <= self.decode_steps <= self.model_config().n_tokens:
            raise ConfigError("decode_steps must be in [1, tokens per frame]")
        GuidanceScales(self.guidance_ws, self.guidance_wt)
        AugmentConfig(self.aug_r, self.aug_r_prime)
        return self

    def to_text(self) -> str:
        return format_flat(asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = parse_flat(text, asdict(cls()))
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]
