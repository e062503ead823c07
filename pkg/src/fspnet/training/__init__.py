from .config import ConfigError, TrainConfig, apply_overrides, dump_config, parse_config_text
from .losses import flow_nll, gaussian_nll, latent_mse
from .network import Decoder, Encoder, NetConfig, NetworkAssembly
from .stages import (
    FrozenWeightError,
    StagePrerequisiteError,
    TrainingError,
    TrainLog,
    compute_losses,
    evaluate_losses,
    run_stage,
)

__all__ = [
    "ConfigError",
    "Decoder",
    "Encoder",
    "FrozenWeightError",
    "NetConfig",
    "NetworkAssembly",
    "StagePrerequisiteError",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "apply_overrides",
    "compute_losses",
    "dump_config",
    "evaluate_losses",
    "flow_nll",
    "gaussian_nll",
    "latent_mse",
    "parse_config_text",
    "run_stage",
]
