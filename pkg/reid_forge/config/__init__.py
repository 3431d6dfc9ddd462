"""
配置管理模塊
Configuration Management Module
"""

from .config_manager import (
    ConfigManager,
    ExperimentConfig,
    GenConfig,
    TrainConfig,
    ModelConfig,
    LossWeights,
    BatchSpec,
    train_config_with,
)

__all__ = [
    'ConfigManager', 'ExperimentConfig', 'GenConfig', 'TrainConfig',
    'ModelConfig', 'LossWeights', 'BatchSpec', 'train_config_with',
]
