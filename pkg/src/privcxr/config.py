"""Experiment configuration: a flat ``key = value`` text file, every key overridable.

Unset optional keys resolve to mode-dependent defaults (see ``resolve``).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, get_args, get_type_hints

from privcxr.data.cohort import TRAIN_FRACTION, CohortSpec, parse_group
from privcxr.nn.model import ModelConfig

OUTPUT_ROOT_ENV = "PRIVCXR_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "private"
    seed: int = 0
    run_name: str = ""
    # privacy
    target_epsilon: float | None = 7.89
    delta: float = 6e-6
    noise_multiplier: float | None = None
    clip_norm: float = 1.5
    sampling_rate: float | None = None
    expected_batch_size: int = 64
    # optimisation
    epochs: int = 20
    batch_size: int = 128
    lr_private: float = 5e-4
    lr_non_private: float = 5e-5
    activation: str | None = None
    augmentation: bool | None = None
    # model
    widths: str = "8,16,32,64"
    groups_per_norm: int = 4
    image_size: int = 32
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False
    # data
    dataset_path: str = ""
    n: int = 2000
    separability: float = 3.0
    age_difficulty: float = 0.25
    planted_gap: float = 0.0
    gap_group: str = "age:4"
    train_fraction: float = TRAIN_FRACTION
    cohort_seed: int | None = None
    # evaluation / execution
    bootstrap_redraws: int = 1000
    threshold_split: str = "test"
    workers: int = 1
    output_dir: str = ""

    # -- derived ---------------------------------------------------------------

    @property
    def private(self) -> bool:
        return self.mode == "private"

    @property
    def lr(self) -> float:
        return self.lr_private if self.private else self.lr_non_private

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            widths=tuple(int(w) for w in self.widths.split(",")),
            groups_per_norm=self.groups_per_norm,
            activation=self.activation,
            num_labels=8,
            in_channels=1,
            image_size=self.image_size,
            stem_kernel=self.stem_kernel,
            stem_stride=self.stem_stride,
            stem_pool=self.stem_pool,
        )

    def cohort_spec(self) -> CohortSpec:
        return CohortSpec(
            n=self.n,
            separability=self.separability,
            age_difficulty=self.age_difficulty,
            planted_gap=self.planted_gap,
            gap_group=self.gap_group,
            split_fractions=(self.train_fraction, 1 - self.train_fraction),
            raw_size=self.image_size,
            seed=self.seed if self.cohort_seed is None else self.cohort_seed,
        )

    def output_path(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        return root / (self.run_name or default_run_name(self))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def default_run_name(cfg: ExperimentConfig) -> str:
    if cfg.private:
        tag = f"eps{cfg.target_epsilon:g}" if cfg.target_epsilon is not None else f"sigma{cfg.noise_multiplier:g}"
    else:
        tag = "nonprivate"
    return f"{tag}_seed{cfg.seed}"


_HINTS = get_type_hints(ExperimentConfig)
KEYS = tuple(f.name for f in fields(ExperimentConfig))


def _convert(key: str, text: str) -> Any:
    hint = _HINTS[key]
    args = get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint)
    raw = text.strip()
    if optional and raw.lower() in ("", "none", "auto"):
        return None
    try:
        if base is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        k = k.replace("-", "_")
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _convert(k, v) if isinstance(v, str) else v
    return resolve(ExperimentConfig(**values))


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill mode-dependent defaults and validate."""
    cfg = dataclasses.replace(cfg)
    if cfg.mode not in ("private", "non-private"):
        raise ConfigError(f"mode must be 'private' or 'non-private', got {cfg.mode!r}")
    if cfg.activation is None:
        cfg.activation = "mish" if cfg.private else "relu"
    if cfg.augmentation is None:
        cfg.augmentation = not cfg.private
    if cfg.private and cfg.augmentation:
        raise ConfigError("augmentation is not allowed in private mode")
    if cfg.private and cfg.target_epsilon is None and cfg.noise_multiplier is None:
        raise ConfigError("private mode needs target_epsilon or noise_multiplier")
    if cfg.target_epsilon is not None and not cfg.target_epsilon > 0:
        raise ConfigError(f"target_epsilon must be > 0, got {cfg.target_epsilon}")
    if not 0 < cfg.delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {cfg.delta}")
    if cfg.noise_multiplier is not None and cfg.noise_multiplier < 0:
        raise ConfigError("noise_multiplier must be >= 0")
    if cfg.sampling_rate is not None and not 0 < cfg.sampling_rate <= 1:
        raise ConfigError(f"sampling_rate must lie in (0, 1], got {cfg.sampling_rate}")
    for key in ("clip_norm", "lr_private", "lr_non_private"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be > 0")
    for key in ("epochs", "batch_size", "expected_batch_size", "n", "workers", "bootstrap_redraws"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg.activation not in ("mish", "relu"):
        raise ConfigError(f"activation must be 'mish' or 'relu', got {cfg.activation!r}")
    if cfg.threshold_split not in ("test", "train"):
        raise ConfigError("threshold_split must be 'test' or 'train'")
    if not 0 < cfg.train_fraction < 1:
        raise ConfigError("train_fraction must lie in (0, 1)")
    try:
        cfg.model_config()
        if not cfg.dataset_path:
            cfg.cohort_spec()
        parse_group(cfg.gap_group)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def render_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
