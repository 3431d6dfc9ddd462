"""
消融引擎與結果收集器測試
"""

import math
from dataclasses import replace

import pandas as pd
import pytest

from reid_forge.common.errors import ConfigError, DatasetError
from reid_forge.common.models import RankingResult
from reid_forge.config.config_manager import (
    HARD_LEAGUE_CONFIG_PATH,
    BatchSpec,
    ConfigManager,
    LossWeights,
    ModelConfig,
    TrainConfig,
)
from reid_forge.core import ablation_engine
from reid_forge.core.ablation_engine import (
    TABLE_COLUMNS,
    AblationEngine,
    ablate,
    combo_weights,
    default_grid,
)
from reid_forge.core.result_collector import ResultCollector, format_kv
from reid_forge.core.synth_generator import generate
from reid_forge.core.training_engine import EpochRecord, RunReport


def _base(**changes) -> TrainConfig:
    values = dict(
        sampler='random',
        batch=BatchSpec(k=2, m=4),
        model=ModelConfig(hidden_dims=(8,), embedding_dim=4),
        epochs=1,
        lr=0.01,
        eval_period=1,
        checkpoint_period=10,
        seed=3,
    )
    values.update(changes)
    return TrainConfig(**values)


def test_default_grid_is_two_by_four():
    grid = default_grid()
    assert len(grid) == 8
    assert grid[0] == ('random', 'triplet')
    assert {s for s, _ in grid} == {'random', 'hierarchical'}


def test_combo_weights():
    base = LossWeights(alpha=0.9, beta=0.5, gamma=0.25, delta=0.0)
    assert (combo_weights(base, 'triplet').gamma, combo_weights(base, 'triplet').delta) == (0.0, 0.0)
    assert combo_weights(base, 'centroid').gamma == 0.25
    assert combo_weights(base, 'triplet_centroid').delta == 0.5
    both = combo_weights(base, 'both')
    assert (both.alpha, both.beta, both.gamma, both.delta) == (0.9, 0.5, 0.25, 0.5)
    with pytest.raises(ConfigError):
        combo_weights(base, 'everything')


def test_plan_assigns_seeds_and_directories(small_dataset, tmp_path):
    engine = AblationEngine(_base(), small_dataset, str(tmp_path), n_seeds=2)
    runs = engine.plan()
    assert len(runs) == 16
    first, second = runs[0], runs[1]
    assert (first.config.seed, second.config.seed) == (3, 4)
    assert second.config.model.init_seed == first.config.model.init_seed + 1
    assert first.config.output_dir.endswith("00_random_triplet/seed_0")
    assert runs[-1].config.sampler == 'hierarchical'
    assert runs[-1].config.weights.gamma > 0 and runs[-1].config.weights.delta > 0


def test_engine_rejects_bad_arguments(small_dataset, tmp_path):
    with pytest.raises(ConfigError):
        AblationEngine(_base(), small_dataset, str(tmp_path), n_seeds=0)
    with pytest.raises(ConfigError):
        AblationEngine(_base(), small_dataset, str(tmp_path), grid=[('greedy', 'triplet')])


def test_full_grid_table_shape(small_dataset, tmp_path):
    table = ablate(_base(), small_dataset, str(tmp_path), n_seeds=1, jobs=2)
    assert list(table.columns) == TABLE_COLUMNS
    assert len(table) == 8
    assert (table['n_ok'] == 1).all()
    assert table.loc[0, 'mAP_delta'] == 0.0
    assert table.loc[0, 'R1_delta'] == 0.0
    assert list(table['centroid']) == [0, 1, 0, 1] * 2
    assert list(table['triplet_centroid']) == [0, 0, 1, 1] * 2


def test_identical_cells_give_identical_rows(small_dataset, tmp_path):
    grid = [('random', 'triplet'), ('random', 'triplet')]
    table = ablate(_base(), small_dataset, str(tmp_path), n_seeds=2, jobs=2, grid=grid)
    assert table.loc[0, 'mAP'] == table.loc[1, 'mAP']
    assert table.loc[0, 'R1'] == table.loc[1, 'R1']


def test_failed_runs_are_recorded_per_cell(small_dataset, tmp_path, monkeypatch):
    """單個格子失敗不影響其他格子"""

    class FlakyEngine:
        def __init__(self, config, dataset):
            self.config = config

        def run(self):
            if self.config.sampler == 'hierarchical':
                raise RuntimeError("boom")
            return RunReport(output_dir="", best_mAP=40.0 + self.config.seed, best_R1=50.0)

    monkeypatch.setattr(ablation_engine, 'TrainingEngine', FlakyEngine)
    grid = [('random', 'triplet'), ('hierarchical', 'triplet')]
    engine = AblationEngine(_base(seed=0), small_dataset, str(tmp_path), n_seeds=3, grid=grid)
    outcomes = engine.execute()
    assert [o.success for o in outcomes] == [True] * 3 + [False] * 3
    assert "boom" in outcomes[-1].error_message

    table = engine.summarize(outcomes)
    assert table.loc[0, 'mAP'] == 41.0
    assert (table.loc[0, 'n_ok'], table.loc[0, 'n_failed']) == (3, 0)
    assert (table.loc[1, 'n_ok'], table.loc[1, 'n_failed']) == (0, 3)
    assert math.isnan(table.loc[1, 'mAP'])


@pytest.mark.slow
def test_hierarchical_centroid_beats_random_triplet_on_hard_league(tmp_path):
    """困難聯賽上 hierarchical + centroid 的中位 mAP 比 random + triplet 高至少 2 分"""
    experiment = ConfigManager(str(HARD_LEAGUE_CONFIG_PATH)).get_experiment_config()
    dataset = generate(experiment.gen)
    base = replace(experiment.train, output_dir=str(tmp_path))
    assert base.epochs == 40
    grid = [('random', 'triplet'), ('hierarchical', 'centroid')]
    table = ablate(base, dataset, str(tmp_path), n_seeds=5, jobs=2, grid=grid)
    assert list(table['n_ok']) == [5, 5]
    assert table.loc[1, 'mAP_delta'] >= 2.0


# ----------------------------------------------------------------------
# 結果收集器

def test_format_kv():
    lines = format_kv({'mAP': 58.3333, 'R1': float('nan'), 'loss': 0.1, 'epochs': 3,
                       'best_checkpoint': None, 'test_mAP': 12.04})
    assert lines == ["mAP=58.3", "R1=nan", "loss=0.1", "epochs=3", "best_checkpoint=", "test_mAP=12.0"]


def test_metrics_log_round_trip(tmp_path):
    report = RunReport(output_dir=str(tmp_path), epochs=[
        EpochRecord(epoch=1, lr=0.01, loss=1.0 / 3.0, n_batches=4, terms={'triplet': 0.25}),
        EpochRecord(epoch=2, lr=0.0055, loss=0.2, n_batches=4, terms={'triplet': 0.125}, mAP=61.5, R1=70.0),
    ])
    path = ResultCollector(tmp_path).write_metrics_log(report)
    assert path.name == "metrics.tsv"
    frame = pd.read_csv(path, sep='\t')
    assert list(frame['epoch']) == [1, 2]
    assert frame['loss'][0] == 1.0 / 3.0
    assert math.isnan(frame['mAP'][0])
    assert frame['loss_triplet'][1] == 0.125


def test_rankings_frame_top_k():
    rankings = [RankingResult('q1', ('g1', 'g3', 'g2'), (1.0, 2.0, 3.0), (False, True, True))]
    frame = ResultCollector.rankings_frame(rankings, top_k=2)
    assert list(frame['gallery_id']) == ['g1', 'g3']
    assert list(frame['rank']) == [1, 2]
    assert list(frame['relevant']) == [0, 1]
    assert len(ResultCollector.rankings_frame(rankings, top_k=None)) == 3


def test_render_table_one_decimal():
    table = pd.DataFrame([{'sampler': 'random', 'mAP': 58.3333, 'R1': float('nan')}])
    text = ResultCollector().render_table(table)
    assert text.splitlines() == ["sampler\tmAP\tR1", "random\t58.3\tnan"]


def test_unwritable_report_path(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    with pytest.raises(DatasetError):
        ResultCollector(blocker / "out").write_ablation_table(pd.DataFrame([{'a': 1}]))
