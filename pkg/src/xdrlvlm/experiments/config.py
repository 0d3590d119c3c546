"""Flat key=value experiment configuration and the four pipeline variants."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("full", "no_medical_encoder", "no_multitask_prompts", "no_multistage")

# Every field a variant is allowed to change, and the value it forces.
VARIANT_FIELDS = {
    "full": {"encoder_init": "medical", "prompt_mode": "multitask", "stage1_enabled": True},
    "no_medical_encoder": {"encoder_init": "generic", "prompt_mode": "multitask", "stage1_enabled": True},
    "no_multitask_prompts": {"encoder_init": "medical", "prompt_mode": "generic", "stage1_enabled": True},
    "no_multistage": {"encoder_init": "medical", "prompt_mode": "multitask", "stage1_enabled": False},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "full"
    seed: int = 0
    # dataset
    data_counts: tuple[int, ...] = (500, 500, 500, 500, 500)
    data_seed: int = 0
    test_fraction: float = 0.2
    hemorrhage_threshold: int = 20
    soft_exudate_threshold: int = 4
    # vision encoder
    patch_size: int = 8
    encoder_dim: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_init: str = "medical"
    pretrain_epochs: int = 5
    pretrain_lr: float = 3e-3
    # connector / decoder
    connector_hidden: int = 64
    decoder_dim: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_mlp_ratio: int = 2
    # stage 1
    stage1_enabled: bool = True
    stage1_epochs: int = 5
    stage1_batch: int = 16
    stage1_lr: float = 1e-2
    stage1_tau: float = 0.07
    # stage 2
    stage2_epochs: int = 3
    stage2_batch: int = 16
    stage2_lr: float = 3e-3
    stage2_lr_min: float = 0.0
    prompt_mode: str = "multitask"
    freeze_encoder: bool = False
    # evaluation
    max_len: int = 80
    eval_workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for key, forced in VARIANT_FIELDS[self.variant].items():
            if getattr(self, key) != forced:
                raise ConfigError(f"variant {self.variant!r} requires {key}={forced!r}, "
                                  f"got {getattr(self, key)!r}")
        if len(self.data_counts) != 5 or any(c < 0 for c in self.data_counts):
            raise ConfigError(f"data_counts must be five non-negative integers, got {self.data_counts}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.stage1_tau <= 0:
            raise ConfigError("stage1_tau must be positive")
        for name in ("stage1_batch", "stage2_batch", "max_len", "eval_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")

    def with_variant(self, variant: str) -> "ExperimentConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        return dataclasses.replace(self, variant=variant, **VARIANT_FIELDS[variant])

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data_counts"] = list(self.data_counts)
        return d

    def to_flat(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_overrides(pairs, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key=value`` strings on top of ``base``.  A ``variant`` key also sets the fields it forces."""
    base = base or ExperimentConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for lineno, line in enumerate(pairs, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        changes[key] = _coerce(key, raw, known[key])
    variant = changes.pop("variant", None)
    if variant is not None:
        base = dataclasses.replace(base, **{k: v for k, v in changes.items() if k not in VARIANT_FIELDS["full"]})
        base = base.with_variant(variant)
        explicit = {k: v for k, v in changes.items() if k in VARIANT_FIELDS["full"]}
        return dataclasses.replace(base, **explicit) if explicit else base
    return dataclasses.replace(base, **changes)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return parse_overrides(Path(path).read_text().splitlines(), base)


def variant_diff(a: ExperimentConfig, b: ExperimentConfig) -> dict:
    return {f.name: (getattr(a, f.name), getattr(b, f.name))
            for f in fields(a) if getattr(a, f.name) != getattr(b, f.name)}
