"""
共用模塊 - 數據模型與異常
Common models and errors
"""

from .errors import (
    ReidForgeError,
    UsageError,
    ConfigError,
    DatasetError,
    NumericError,
    ShapeError,
    SamplingError,
    InsufficientIdentitiesError,
    LossError,
    EvaluationError,
)
from .models import (
    MatchMeta, ActionRef, Sample, Dataset, Batch, RankingResult, ROLES, SPLITS, LEVELS,
)

__all__ = [
    'ReidForgeError', 'UsageError', 'ConfigError', 'DatasetError',
    'NumericError', 'ShapeError', 'SamplingError', 'InsufficientIdentitiesError', 'LossError',
    'EvaluationError',
    'MatchMeta', 'ActionRef', 'Sample', 'Dataset', 'Batch', 'RankingResult',
    'ROLES', 'SPLITS', 'LEVELS',
]
