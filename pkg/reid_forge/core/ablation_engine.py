"""
消融引擎 - AblationEngine
並行執行 {random, hierarchical} × {triplet, +centroid, +triplet-centroid, +both} 的訓練網格

每個格子跑 n 個種子 (seed = base + i，init_seed 同樣偏移)，報告中位數 mAP / R1，
以及相對 random + triplet 基線的差值。單個運行失敗只記錄在所在格子，不中斷其他運行。
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from ..common.errors import ConfigError
from ..common.models import Dataset
from ..config.config_manager import LossWeights, TrainConfig, train_config_with
from .training_engine import TrainingEngine

SAMPLERS = ('random', 'hierarchical')
LOSS_COMBOS = ('triplet', 'centroid', 'triplet_centroid', 'both')
BASELINE = ('random', 'triplet')
DEFAULT_AUX_WEIGHT = 0.5

TABLE_COLUMNS = ['sampler', 'losses', 'triplet', 'centroid', 'triplet_centroid',
                 'mAP', 'R1', 'mAP_delta', 'R1_delta', 'n_ok', 'n_failed']


def default_grid() -> List[Tuple[str, str]]:
    return [(sampler, losses) for sampler in SAMPLERS for losses in LOSS_COMBOS]


def combo_weights(base: LossWeights, losses: str) -> LossWeights:
    """
    按損失組合設置 gamma (中心損失) 與 delta (三元組-中心損失)

    基礎配置中權重為 0 的輔助損失打開時使用 0.5
    """
    if losses not in LOSS_COMBOS:
        raise ConfigError(f"未知的損失組合: {losses}")
    gamma = base.gamma if base.gamma > 0 else DEFAULT_AUX_WEIGHT
    delta = base.delta if base.delta > 0 else DEFAULT_AUX_WEIGHT
    use_centroid = losses in ('centroid', 'both')
    use_tc = losses in ('triplet_centroid', 'both')
    return LossWeights(
        alpha=base.alpha,
        beta=base.beta,
        gamma=gamma if use_centroid else 0.0,
        delta=delta if use_tc else 0.0,
        margin=base.margin,
        margin_tc=base.margin_tc,
        centroid_mode=base.centroid_mode,
        separation_margin=base.separation_margin,
    )


@dataclass
class AblationRun:
    """網格中的一次訓練"""
    row: int
    sampler: str
    losses: str
    seed_index: int
    config: TrainConfig


@dataclass
class RunOutcome:
    """單次訓練的結果"""
    success: bool
    run: AblationRun
    execution_time: float
    mAP: float = float('nan')
    R1: float = float('nan')
    error_message: Optional[str] = None


class AblationEngine:
    """消融網格執行引擎"""

    def __init__(self, base_config: TrainConfig, dataset: Dataset, output_dir: str,
                 n_seeds: int = 5, jobs: int = 1, grid: Optional[Sequence[Tuple[str, str]]] = None):
        """
        初始化消融引擎

        Args:
            base_config: 基礎訓練配置
            dataset: 所有運行共享的只讀數據集
            output_dir: 輸出目錄，每次運行有自己的子目錄
            n_seeds: 每個格子的種子數
            jobs: 並發運行數
            grid: (sampler, losses) 行列表，默認完整 2×4 網格
        """
        if n_seeds < 1:
            raise ConfigError("ablation_seeds 必須 >= 1")
        if jobs < 1:
            raise ConfigError("jobs 必須 >= 1")
        self.base_config = base_config
        self.dataset = dataset
        self.output_dir = Path(output_dir)
        self.n_seeds = n_seeds
        self.jobs = jobs
        self.grid = list(grid) if grid is not None else default_grid()
        for sampler, _ in self.grid:
            if sampler not in SAMPLERS:
                raise ConfigError(f"未知的採樣器: {sampler}")
        self.logger = logging.getLogger(__name__)

    def plan(self) -> List[AblationRun]:
        """展開網格為運行列表"""
        base = self.base_config
        runs = []
        for row, (sampler, losses) in enumerate(self.grid):
            weights = combo_weights(base.weights, losses)
            for i in range(self.n_seeds):
                config = train_config_with(
                    base,
                    sampler=sampler,
                    weights=weights,
                    seed=base.seed + i,
                    output_dir=str(self.output_dir / f"{row:02d}_{sampler}_{losses}" / f"seed_{i}"),
                    model__init_seed=base.model.init_seed + i,
                )
                runs.append(AblationRun(row, sampler, losses, i, config))
        return runs

    def _execute_single_run(self, run: AblationRun) -> RunOutcome:
        start_time = time.time()
        try:
            self.logger.debug(f"開始運行: {run.sampler}/{run.losses} seed#{run.seed_index}")
            report = TrainingEngine(run.config, self.dataset).run()
            return RunOutcome(True, run, time.time() - start_time, report.best_mAP, report.best_R1)
        except Exception as e:
            return RunOutcome(False, run, time.time() - start_time, error_message=f"{type(e).__name__}: {e}")

    def execute(self) -> List[RunOutcome]:
        """並行執行所有運行"""
        runs = self.plan()
        self.logger.info(f"開始消融: {len(self.grid)} 行 × {self.n_seeds} 個種子, 並發 {self.jobs}")
        outcomes: List[RunOutcome] = []
        completed_count = failed_count = 0

        with ThreadPoolExecutor(max_workers=self.jobs) as executor:
            future_to_run = {executor.submit(self._execute_single_run, run): run for run in runs}
            for future in as_completed(future_to_run):
                run = future_to_run[future]
                try:
                    outcome = future.result()
                except Exception as e:
                    outcome = RunOutcome(False, run, 0.0, error_message=f"執行異常: {e}")
                outcomes.append(outcome)

                if outcome.success:
                    completed_count += 1
                    self.logger.info(
                        f"運行成功: {run.sampler}/{run.losses} seed#{run.seed_index} "
                        f"mAP={outcome.mAP:.1f} R1={outcome.R1:.1f} ({outcome.execution_time:.1f}s)")
                else:
                    failed_count += 1
                    self.logger.warning(
                        f"運行失敗: {run.sampler}/{run.losses} seed#{run.seed_index} - {outcome.error_message}")

        self.logger.info(f"消融完成 - 成功: {completed_count}, 失敗: {failed_count}")
        outcomes.sort(key=lambda o: (o.run.row, o.run.seed_index))
        return outcomes

    def summarize(self, outcomes: Sequence[RunOutcome]) -> pd.DataFrame:
        """每行取中位數，並計算相對基線的差值"""
        frame = pd.DataFrame([{
            'row': o.run.row, 'mAP': o.mAP, 'R1': o.R1, 'ok': o.success,
        } for o in outcomes], columns=['row', 'mAP', 'R1', 'ok'])

        rows: List[Dict[str, Any]] = []
        for row, (sampler, losses) in enumerate(self.grid):
            cell = frame[frame['row'] == row]
            ok = cell[cell['ok'].astype(bool)]
            rows.append({
                'sampler': sampler,
                'losses': losses,
                'triplet': 1,
                'centroid': int(losses in ('centroid', 'both')),
                'triplet_centroid': int(losses in ('triplet_centroid', 'both')),
                'mAP': float(ok['mAP'].median()) if len(ok) else float('nan'),
                'R1': float(ok['R1'].median()) if len(ok) else float('nan'),
                'n_ok': int(len(ok)),
                'n_failed': int(len(cell) - len(ok)),
            })

        table = pd.DataFrame(rows)
        baseline = table[(table['sampler'] == BASELINE[0]) & (table['losses'] == BASELINE[1])]
        if len(baseline):
            base_map, base_r1 = baseline.iloc[0]['mAP'], baseline.iloc[0]['R1']
        else:
            base_map = base_r1 = math.nan
        table['mAP_delta'] = table['mAP'] - base_map
        table['R1_delta'] = table['R1'] - base_r1
        return table[TABLE_COLUMNS]

    def run(self) -> pd.DataFrame:
        return self.summarize(self.execute())


def ablate(base_config: TrainConfig, dataset: Dataset, output_dir: str, n_seeds: int = 5,
           jobs: int = 1, grid: Optional[Sequence[Tuple[str, str]]] = None) -> pd.DataFrame:
    """執行消融網格並返回中位數表"""
    return AblationEngine(base_config, dataset, output_dir, n_seeds, jobs, grid).run()
