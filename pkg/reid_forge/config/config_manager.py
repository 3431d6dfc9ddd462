"""
配置管理器 - ConfigManager
負責讀取和管理實驗配置文件 (扁平 key=value 格式)
"""

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import dotenv_values

from ..common.errors import ConfigError

SEED_ENV_VAR = "REIDFORGE_SEED"
DEFAULT_CONFIG_PATH = Path(__file__).parent.parent / "experiment.conf"
HARD_LEAGUE_CONFIG_PATH = Path(__file__).parent.parent / "hard_league.conf"

SAMPLER_KINDS = ('random', 'hierarchical')
CENTROID_MODES = ('as_written', 'separation')
METRICS = ('euclidean', 'cosine')


@dataclass(frozen=True)
class GenConfig:
    """合成數據生成配置"""
    n_teams: int = 6
    matches_per_pair: int = 2
    actions_per_match: int = 2
    players_per_team: int = 8
    replays_per_action: int = 2
    feature_dim: int = 32
    team_scale: float = 3.0
    player_scale: float = 1.0
    kit_scale: float = 0.5
    view_noise: float = 0.3
    occlusion_prob: float = 0.2
    occlusion_blend: float = 0.3
    visible_fraction: float = 1.0
    referees_per_match: int = 0
    n_seasons: int = 2
    base_year: int = 2018
    test_fraction: float = 0.3
    valid_fraction: float = 0.0
    seed: int = 7

    def validate(self) -> List[str]:
        errors = []
        for name in ('n_teams', 'matches_per_pair', 'actions_per_match',
                     'players_per_team', 'replays_per_action'):
            if getattr(self, name) < 1:
                errors.append(f"{name} 必須 >= 1")
        if self.n_seasons < 2:
            errors.append("n_seasons 必須 >= 2 (重複對陣需要跨越不同年份)")
        if self.n_teams < 2:
            errors.append("n_teams 必須 >= 2 (比賽需要兩支球隊)")
        if self.feature_dim < 2:
            errors.append("feature_dim 必須 >= 2")
        for name in ('team_scale', 'player_scale', 'kit_scale', 'view_noise'):
            if getattr(self, name) < 0:
                errors.append(f"{name} 不能為負")
        for name in ('occlusion_prob', 'occlusion_blend', 'test_fraction', 'valid_fraction'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} 必須在 [0, 1] 區間")
        if not 0.0 < self.visible_fraction <= 1.0:
            errors.append("visible_fraction 必須在 (0, 1] 區間")
        if self.test_fraction + self.valid_fraction > 1.0:
            errors.append("test_fraction + valid_fraction 不能超過 1")
        if self.referees_per_match < 0:
            errors.append("referees_per_match 不能為負")
        if self.base_year <= 0:
            errors.append("base_year 必須大於0")
        return errors


@dataclass(frozen=True)
class BatchSpec:
    """批次形狀: 每個身份 K 個樣本，每批 M 個身份"""
    k: int = 4
    m: int = 8

    @property
    def batch_size(self) -> int:
        return self.k * self.m

    def validate(self) -> List[str]:
        errors = []
        if self.k < 1:
            errors.append("k 必須 >= 1")
        if self.m < 2:
            errors.append("m 必須 >= 2 (挖掘需要負樣本身份)")
        return errors


@dataclass(frozen=True)
class ModelConfig:
    """嵌入網絡形狀"""
    input_dim: int = 32
    hidden_dims: Tuple[int, ...] = (64,)
    embedding_dim: int = 32
    n_classes: int = 2
    init_seed: int = 0
    batchnorm: bool = True
    init_scheme: str = "uniform"  # uniform / identity

    def validate(self) -> List[str]:
        errors = []
        if self.input_dim < 1 or self.embedding_dim < 1:
            errors.append("input_dim 與 embedding_dim 必須 >= 1")
        if any(h < 1 for h in self.hidden_dims):
            errors.append("hidden_dims 每層必須 >= 1")
        if self.n_classes < 2:
            errors.append("n_classes 必須 >= 2")
        if self.init_scheme not in ('uniform', 'identity'):
            errors.append(f"未知的初始化方式: {self.init_scheme}")
        return errors


@dataclass(frozen=True)
class LossWeights:
    """組合損失權重: alpha*L_T + beta*L_C + gamma*L_Centroid + delta*L_TC"""
    alpha: float = 0.9
    beta: float = 0.5
    gamma: float = 0.5
    delta: float = 0.0
    margin: float = 0.3
    margin_tc: float = 0.3
    centroid_mode: str = "separation"
    separation_margin: float = 1.0

    def validate(self) -> List[str]:
        errors = []
        for name in ('alpha', 'beta', 'gamma', 'delta'):
            if getattr(self, name) < 0:
                errors.append(f"{name} 不能為負")
        for name in ('margin', 'margin_tc', 'separation_margin'):
            if getattr(self, name) < 0:
                errors.append(f"{name} 不能為負")
        if self.centroid_mode not in CENTROID_MODES:
            errors.append(f"centroid_mode 必須是 {CENTROID_MODES} 之一")
        return errors


@dataclass(frozen=True)
class TrainConfig:
    """訓練配置"""
    dataset: str = ""
    output_dir: str = "runs/default"
    sampler: str = "hierarchical"
    batch: BatchSpec = field(default_factory=BatchSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    metric: str = "euclidean"
    epochs: int = 40
    lr: float = 0.01
    lr_floor: float = 0.1
    momentum: float = 0.9
    checkpoint_period: int = 10
    eval_period: int = 5
    eval_split: str = "test"
    seed: int = 0

    def learning_rate(self, epoch: int) -> float:
        """線性衰減: base * (1 - (1 - floor) * epoch / epochs)"""
        return self.lr * (1.0 - (1.0 - self.lr_floor) * epoch / self.epochs)

    def validate(self) -> List[str]:
        errors = self.batch.validate() + self.model.validate() + self.weights.validate()
        if self.sampler not in SAMPLER_KINDS:
            errors.append(f"sampler 必須是 {SAMPLER_KINDS} 之一")
        if self.metric not in METRICS:
            errors.append(f"metric 必須是 {METRICS} 之一")
        if self.epochs < 1:
            errors.append("epochs 必須 >= 1")
        if self.lr < 0:
            errors.append("lr 不能為負")
        if not 0.0 <= self.lr_floor <= 1.0:
            errors.append("lr_floor 必須在 [0, 1] 區間")
        if not 0.0 <= self.momentum < 1.0:
            errors.append("momentum 必須在 [0, 1) 區間")
        if self.checkpoint_period < 1 or self.eval_period < 1:
            errors.append("checkpoint_period 與 eval_period 必須 >= 1")
        if self.eval_split not in ('test', 'valid'):
            errors.append("eval_split 必須是 test 或 valid")
        return errors


@dataclass(frozen=True)
class ExperimentConfig:
    """一次實驗的完整聲明: 生成 + 訓練 + 評估 + 消融"""
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation_seeds: int = 5
    jobs: int = 1


# 鍵 -> (所屬區塊, 字段名, 類型)
# 區塊: gen / train / batch / model / weights / experiment
KEY_SCHEMA: Dict[str, Tuple[str, str, type]] = {
    'n_teams': ('gen', 'n_teams', int),
    'matches_per_pair': ('gen', 'matches_per_pair', int),
    'actions_per_match': ('gen', 'actions_per_match', int),
    'players_per_team': ('gen', 'players_per_team', int),
    'replays_per_action': ('gen', 'replays_per_action', int),
    'feature_dim': ('gen', 'feature_dim', int),
    'team_scale': ('gen', 'team_scale', float),
    'player_scale': ('gen', 'player_scale', float),
    'kit_scale': ('gen', 'kit_scale', float),
    'view_noise': ('gen', 'view_noise', float),
    'occlusion_prob': ('gen', 'occlusion_prob', float),
    'occlusion_blend': ('gen', 'occlusion_blend', float),
    'visible_fraction': ('gen', 'visible_fraction', float),
    'referees_per_match': ('gen', 'referees_per_match', int),
    'n_seasons': ('gen', 'n_seasons', int),
    'base_year': ('gen', 'base_year', int),
    'test_fraction': ('gen', 'test_fraction', float),
    'valid_fraction': ('gen', 'valid_fraction', float),
    'gen_seed': ('gen', 'seed', int),
    'dataset': ('train', 'dataset', str),
    'output_dir': ('train', 'output_dir', str),
    'sampler': ('train', 'sampler', str),
    'k': ('batch', 'k', int),
    'm': ('batch', 'm', int),
    'hidden_dims': ('model', 'hidden_dims', tuple),
    'embedding_dim': ('model', 'embedding_dim', int),
    'batchnorm': ('model', 'batchnorm', bool),
    'init_seed': ('model', 'init_seed', int),
    'alpha': ('weights', 'alpha', float),
    'beta': ('weights', 'beta', float),
    'gamma': ('weights', 'gamma', float),
    'delta': ('weights', 'delta', float),
    'margin': ('weights', 'margin', float),
    'margin_tc': ('weights', 'margin_tc', float),
    'centroid_mode': ('weights', 'centroid_mode', str),
    'separation_margin': ('weights', 'separation_margin', float),
    'metric': ('train', 'metric', str),
    'epochs': ('train', 'epochs', int),
    'lr': ('train', 'lr', float),
    'lr_floor': ('train', 'lr_floor', float),
    'momentum': ('train', 'momentum', float),
    'checkpoint_period': ('train', 'checkpoint_period', int),
    'eval_period': ('train', 'eval_period', int),
    'eval_split': ('train', 'eval_split', str),
    'seed': ('train', 'seed', int),
    'ablation_seeds': ('experiment', 'ablation_seeds', int),
    'jobs': ('experiment', 'jobs', int),
}


def parse_value(key: str, raw: Optional[str], kind: type) -> Any:
    """把字符串值轉換為鍵對應的類型"""
    text = "" if raw is None else str(raw).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(part) for part in text.split(',') if part.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"配置鍵 {key} 的值非法: {raw!r} (期望 {kind.__name__})") from None


def format_value(value: Any) -> str:
    """把配置值寫回 key=value 文本"""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


class ConfigManager:
    """配置管理器"""

    def __init__(self, config_path: str = None, overrides: Optional[Dict[str, Any]] = None,
                 check_paths: bool = True):
        """
        初始化配置管理器

        Args:
            config_path: 配置文件路徑，為空則只用內置默認值
            overrides: 額外覆蓋 (鍵必須在 KEY_SCHEMA 中)
            check_paths: 是否檢查 dataset 路徑存在
        """
        self.logger = logging.getLogger(__name__)
        self.config_path = Path(config_path) if config_path else None
        self.config_data: Dict[str, Any] = {}
        self.experiment = ExperimentConfig()

        self._load_config(overrides or {})

        errors = self.validate_config(check_paths=check_paths)
        if errors:
            raise ConfigError("; ".join(errors))

    def _load_config(self, overrides: Dict[str, Any]):
        """載入配置文件並套用覆蓋與環境變量"""
        values = {key: format_value(self._default_for(key)) for key in KEY_SCHEMA}

        if self.config_path is not None:
            if not self.config_path.is_file():
                raise ConfigError(f"配置文件不存在: {self.config_path}")
            self.logger.info(f"載入配置文件: {self.config_path}")
            file_values = dotenv_values(self.config_path)
            unknown = sorted(set(file_values) - set(KEY_SCHEMA))
            if unknown:
                raise ConfigError(f"未知的配置鍵: {', '.join(unknown)}")
            values.update({k: ("" if v is None else v) for k, v in file_values.items()})

        for key, value in overrides.items():
            if key not in KEY_SCHEMA:
                raise ConfigError(f"未知的配置鍵: {key}")
            values[key] = format_value(value)

        env_seed = os.environ.get(SEED_ENV_VAR)
        if env_seed:
            self.logger.info(f"環境變量 {SEED_ENV_VAR}={env_seed} 覆蓋 seed")
            values['seed'] = env_seed

        self.config_data = {key: parse_value(key, values[key], KEY_SCHEMA[key][2])
                            for key in KEY_SCHEMA}
        self._parse_config()

    @staticmethod
    def _default_for(key: str) -> Any:
        section, name, _ = KEY_SCHEMA[key]
        defaults = {
            'gen': GenConfig(), 'train': TrainConfig(), 'batch': BatchSpec(),
            'model': ModelConfig(), 'weights': LossWeights(), 'experiment': ExperimentConfig(),
        }
        return getattr(defaults[section], name)

    def _parse_config(self):
        """把扁平鍵組裝為分區塊的數據類"""
        sections: Dict[str, Dict[str, Any]] = {
            'gen': {}, 'train': {}, 'batch': {}, 'model': {}, 'weights': {}, 'experiment': {}}
        for key, value in self.config_data.items():
            section, name, _ = KEY_SCHEMA[key]
            sections[section][name] = value

        gen = GenConfig(**sections['gen'])
        model = ModelConfig(input_dim=gen.feature_dim, **sections['model'])
        train = TrainConfig(
            batch=BatchSpec(**sections['batch']),
            model=model,
            weights=LossWeights(**sections['weights']),
            **sections['train'],
        )
        self.experiment = ExperimentConfig(gen=gen, train=train, **sections['experiment'])
        self.logger.debug(f"成功解析 {len(self.config_data)} 個配置鍵")

    def get_gen_config(self) -> GenConfig:
        return self.experiment.gen

    def get_train_config(self) -> TrainConfig:
        return self.experiment.train

    def get_experiment_config(self) -> ExperimentConfig:
        return self.experiment

    def get_eval_options(self) -> Dict[str, Any]:
        """評估相關選項"""
        train = self.experiment.train
        return {'metric': train.metric, 'split': train.eval_split}

    def validate_config(self, check_paths: bool = True) -> List[str]:
        """驗證配置合法性"""
        errors = self.experiment.gen.validate() + self.experiment.train.validate()
        if self.experiment.ablation_seeds < 1:
            errors.append("ablation_seeds 必須 >= 1")
        if self.experiment.jobs < 1:
            errors.append("jobs 必須 >= 1")
        dataset = self.experiment.train.dataset
        if check_paths and dataset and not Path(dataset).is_dir():
            errors.append(f"數據集目錄不存在: {dataset}")
        return errors

    def save_config(self, path) -> Path:
        """保存完整 (含默認值) 配置到文件"""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8') as f:
                f.write("# reid-forge 實驗配置 (已展開所有默認值)\n")
                for key in KEY_SCHEMA:
                    f.write(f"{key}={format_value(self.config_data[key])}\n")
            self.logger.info(f"配置已保存到: {path}")
        except OSError as e:
            self.logger.error(f"保存配置失敗: {e}")
            raise ConfigError(f"無法寫入配置文件 {path}: {e}") from e
        return path

    def with_overrides(self, **overrides) -> "ConfigManager":
        """以當前配置為基礎套用覆蓋，返回新的配置管理器"""
        merged = dict(self.config_data)
        merged.update(overrides)
        return ConfigManager(None, overrides=merged, check_paths=False)

    def get_config_summary(self) -> Dict[str, Any]:
        """獲取配置摘要"""
        train = self.experiment.train
        return {
            'config_path': str(self.config_path) if self.config_path else None,
            'key_count': len(self.config_data),
            'dataset': train.dataset or '(synthetic)',
            'sampler': train.sampler,
            'batch_size': train.batch.batch_size,
            'epochs': train.epochs,
            'seed': train.seed,
        }


def train_config_with(config: TrainConfig, **changes) -> TrainConfig:
    """替換 TrainConfig 的頂層或嵌套字段 (weights__gamma=0.5 形式)"""
    nested: Dict[str, Dict[str, Any]] = {}
    top: Dict[str, Any] = {}
    for key, value in changes.items():
        if '__' in key:
            section, name = key.split('__', 1)
            nested.setdefault(section, {})[name] = value
        else:
            top[key] = value
    for section, values in nested.items():
        top[section] = replace(getattr(config, section), **values)
    return replace(config, **top)

