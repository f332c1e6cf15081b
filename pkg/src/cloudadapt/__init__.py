"""Parameter-efficient cloud segmentation on a frozen transformer backbone."""

from .config import ExperimentConfig, ModelConfig, TrainConfig, load_config, large_shape_config
from .errors import CheckpointError, ConfigError, ContractError, DataError, DimensionError, NumericAbort
from .model import CloudAdapterNet, ParamReport, interaction_schedule, param_report

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "CloudAdapterNet",
    "ConfigError",
    "ContractError",
    "DataError",
    "DimensionError",
    "ExperimentConfig",
    "ModelConfig",
    "NumericAbort",
    "ParamReport",
    "TrainConfig",
    "interaction_schedule",
    "load_config",
    "large_shape_config",
    "param_report",
]
