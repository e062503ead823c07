"""Training configuration and the flat ``key = value`` config format."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

STAGES = ("decoder", "synthetic", "real")
STAGE_DEFAULT_LR = {"decoder": 1e-3, "synthetic": 1e-3, "real": 1e-4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "synthetic"
    lr: float | None = None
    w_rec: float = 1.0
    w_lat: float = 1.0
    w_nf: float = 1.0
    batch_size: int = 64
    max_epochs: int = 400
    plateau_window: int = 30
    early_stop_threshold: float = 1e-4
    seed: int = 0
    decoder_free: bool = False
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sched_patience: int = 10
    sched_factor: float = 0.5
    sched_threshold: float = 1e-4
    min_lr: float = 1e-6
    latent_draws: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if min(self.w_rec, self.w_lat, self.w_nf) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size < 1 or self.latent_draws < 1:
            raise ConfigError("batch_size and latent_draws must be >= 1")

    @property
    def initial_lr(self):
        return STAGE_DEFAULT_LR[self.stage] if self.lr is None else self.lr

    @property
    def weights(self):
        if self.stage == "decoder":
            return 1.0, 0.0, 0.0
        if self.decoder_free:
            return 0.0, self.w_lat, self.w_nf
        return self.w_rec, self.w_lat, self.w_nf


def _coerce(field_type, raw):
    text = raw.strip()
    kind = str(field_type)
    if "bool" in kind:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if "int" in kind:
        return int(text)
    if "float" in kind:
        if text.lower() in ("none", ""):
            return None
        return float(text)
    return text


def parse_config_text(text):
    """Flat ``key = value`` pairs; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def apply_overrides(cfg, pairs, allowed=None):
    """Typed overrides from string pairs; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(cfg)}
    allowed = set(types) if allowed is None else set(allowed)
    updates = {}
    for key, raw in pairs.items():
        if key not in types or key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = _coerce(types[key], raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return replace(cfg, **updates)


def dump_config(cfg):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(cfg)]
    return "\n".join(lines) + "\n"
