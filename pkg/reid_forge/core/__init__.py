"""
球員重識別度量學習工具 - 核心模塊
Core modules for reid-forge
"""

from .synth_generator import SyntheticLeagueGenerator
from .batch_sampler import RandomBatchSampler, HierarchicalBatchSampler, make_sampler, batch_stats
from .embedding_model import EmbeddingNet, init, load_checkpoint, save_checkpoint
from .training_engine import TrainingEngine, MomentumOptimizer, RunReport, train
from .evaluator import evaluate_split, oracle_evaluate, EvaluationResult
from .ablation_engine import AblationEngine, ablate
from .result_collector import ResultCollector

__all__ = [
    'SyntheticLeagueGenerator',
    'RandomBatchSampler',
    'HierarchicalBatchSampler',
    'make_sampler',
    'batch_stats',
    'EmbeddingNet',
    'init',
    'load_checkpoint',
    'save_checkpoint',
    'TrainingEngine',
    'MomentumOptimizer',
    'RunReport',
    'train',
    'evaluate_split',
    'oracle_evaluate',
    'EvaluationResult',
    'AblationEngine',
    'ablate',
    'ResultCollector',
]
