"""Flat ``key = value`` run configuration with typed, documented defaults."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .sampling import SampleConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# key: (default, help)
DEFAULTS: dict[str, tuple[object, str]] = {
    "model.L": (6, "transformer blocks"),
    "model.D": (64, "latent channels and model width"),
    "model.N": (16, "spatial tokens per frame"),
    "model.F": (16, "frames"),
    "model.heads": (4, "attention heads"),
    "model.gamma": (1.5, "exponent of the depth-wise audio schedule"),
    "model.k_max": (8, "maximum phases per prompt"),
    "model.vocab": (128, "token embedding rows"),
    "model.seed": (0, "parameter initialization seed (stage 2 re-initializes from it)"),
    "model.phase_embeddings": (True, "add per-phase embeddings to text tokens"),
    "model.audio_schedule": ("progressive", "progressive or constant audio residual scale"),
    "model.hard_mask": (False, "restrict phase tokens to their window (ablation)"),
    "train.stage": (2, "1 trains the audio adapter only, 2 trains everything"),
    "train.steps": (2000, "optimizer steps"),
    "train.batch": (8, "batch size"),
    "train.lr": (1e-3, "AdamW learning rate"),
    "train.dropout_text": (0.1, "probability of replacing text with the null token"),
    "train.dropout_audio": (0.1, "probability of replacing audio with the null token"),
    "train.seed": (0, "seed for batches, flow times, noise and dropout"),
    "train.checkpoint_every": (500, "steps between periodic checkpoints (0 = final only)"),
    "train.timing": (False, "fill the seconds column of the log (breaks byte-identical logs)"),
    "sample.steps": (40, "Euler steps"),
    "sample.cfg_text": (5.0, "text guidance scale"),
    "sample.cfg_audio": (5.0, "audio guidance scale"),
    "sample.seed": (0, "initial-noise seed"),
    "sample.order": ("audio_first", "guidance composition order"),
    "data.samples": (400, "samples to generate"),
    "data.actions": (16, "number of distinct actions"),
    "data.phases": (2, "phases per sample"),
    "data.seed": (0, "first sample seed; sample i uses seed + i"),
    "data.split": ("train", "train, eval or any action combinations"),
    "eval.theta_hit": (0.5, "activation threshold for a phase hit"),
    "eval.batch": (25, "samples generated per sampler call"),
    "paths.out": ("runs", "output directory"),
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v for k, (v, _) in DEFAULTS.items()})

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw) -> "RunConfig":
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
        return self

    def updated(self, **kw) -> "RunConfig":
        """Copy with overrides given as ``model_L=4`` style keywords."""
        out = RunConfig(dict(self.values))
        for k, v in kw.items():
            out.set(k.replace("_", ".", 1), v)
        return out

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
            cfg.values[key] = _parse_value(key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"{path}: {e.strerror}") from None
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in self.values.items())

    def model(self) -> ModelConfig:
        v = self.values
        try:
            return ModelConfig(
                L=v["model.L"], D=v["model.D"], N=v["model.N"], F=v["model.F"], heads=v["model.heads"],
                gamma=v["model.gamma"], k_max=v["model.k_max"], vocab=v["model.vocab"],
                phase_embeddings=v["model.phase_embeddings"], audio_schedule=v["model.audio_schedule"],
                hard_mask=v["model.hard_mask"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train(self, stage: int | None = None) -> TrainConfig:
        v = self.values
        try:
            return TrainConfig(
                stage=v["train.stage"] if stage is None else stage, steps=v["train.steps"], batch=v["train.batch"],
                lr=v["train.lr"], dropout_text=v["train.dropout_text"], dropout_audio=v["train.dropout_audio"],
                seed=v["train.seed"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def sample(self) -> SampleConfig:
        v = self.values
        try:
            return SampleConfig(
                steps=v["sample.steps"], cfg_text=v["sample.cfg_text"], cfg_audio=v["sample.cfg_audio"],
                seed=v["sample.seed"], order=v["sample.order"],
            )
        except (ValueError, RuntimeError) as e:
            raise ConfigError(str(e)) from None
