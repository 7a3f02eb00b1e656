"""Flat `key = value` experiment configuration.

One file drives every pipeline stage. Unknown keys are rejected so typos
cannot silently fall back to defaults, and each stage writes the fully
resolved configuration beside its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .model import ModelConfig
from .synthdata import SceneConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # scene generation
    scene_size: int = 96
    classes: int = 6
    noise_amplitude: float = 0.08
    void_border: int = 1
    insert_prob: float = 0.25
    min_shapes: int = 6
    max_shapes: int = 10
    train_samples: int = 512
    test_samples: int = 128
    # model
    enc_widths: tuple = (8, 16, 32)
    decoder_width: int = 32
    kernel_size: int = 3
    # optimization
    members: int = 10
    member_epochs: int = 5
    student_epochs: int = 60
    batch_size: int = 8
    crop: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decoder_lr_multiplier: float = 10.0
    schedule_power: float = 0.9
    decay_bias: bool = True
    # evaluation
    fractions: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    ablate_sizes: tuple = (2, 4, 6, 8, 10, 12)
    ablate_repeats: int = 3
    bench_runs: int = 25
    bench_warmup: int = 3
    eval_batch: int = 8
    # reproducibility
    seed: int = 1234

    def scene_config(self) -> SceneConfig:
        return SceneConfig(size=self.scene_size, num_classes=self.classes,
                           noise_amplitude=self.noise_amplitude,
                           void_border=self.void_border,
                           insert_prob=self.insert_prob,
                           min_shapes=self.min_shapes,
                           max_shapes=self.max_shapes)

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_classes=self.classes,
                           encoder_widths=self.enc_widths,
                           decoder_width=self.decoder_width,
                           kernel_size=self.kernel_size,
                           input_size=self.scene_size)

    def member_train_config(self) -> TrainConfig:
        return self._train_config(self.member_epochs)

    def student_train_config(self) -> TrainConfig:
        return self._train_config(self.student_epochs, seed=_derive(self.seed, 20))

    def _train_config(self, epochs: int, seed: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=epochs, batch_size=self.batch_size,
                           lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay,
                           decoder_lr_multiplier=self.decoder_lr_multiplier,
                           schedule_power=self.schedule_power, crop=self.crop,
                           seed=self.seed if seed is None else seed,
                           decay_bias=self.decay_bias)

    def member_seed(self, index: int) -> int:
        return _derive(self.seed, 10, index)

    def ablate_seed(self, repeat: int) -> int:
        return _derive(self.seed, 30, repeat)


def _derive(base: int, tag: int, *rest: int) -> int:
    import numpy as np
    ss = np.random.SeedSequence((int(base), int(tag)) + tuple(int(r) for r in rest))
    return int(ss.generate_state(1, np.uint64)[0])


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = type(current[0]) if current else float
            return tuple(elem(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None
    raise ConfigError(f"unsupported config field type for {key!r}")


def apply_assignment(config: ExperimentConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(config, key, _parse_value(key, raw, getattr(config, key)))


def parse_config_text(text: str, config: ExperimentConfig | None = None,
                      source: str = "<config>") -> ExperimentConfig:
    config = config if config is not None else ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        try:
            apply_assignment(config, key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return config


def load_config(path, config: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), config, source=str(path))


def resolved_text(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
