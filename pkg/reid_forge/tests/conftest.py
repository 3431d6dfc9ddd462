"""
測試共用夾具
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np
import pytest

from reid_forge.common.models import ActionRef, Dataset, MatchMeta, Sample
from reid_forge.config.config_manager import GenConfig
from reid_forge.core.synth_generator import SyntheticLeagueGenerator


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 長時間訓練的驗收測試 (用 -m slow 運行)")


def make_dataset(records: Sequence[Tuple[int, str, str]], features,
                 matches: Dict[str, Tuple[int, str, str]], actions: Dict[str, str]) -> Dataset:
    """
    由簡單記錄構造數據集

    Args:
        records: (player_id, action_id, role) 列表，split 由角色推出 (train 或 test)
        features: 每條記錄一行
        matches: match_id -> (year, team_a, team_b)
        actions: action_id -> match_id
    """
    samples = [
        Sample(
            sample_id=f"s{i}",
            player_id=pid,
            action_id=action_id,
            role=role,
            feature_index=i,
            split='train' if role == 'train' else 'test',
        )
        for i, (pid, action_id, role) in enumerate(records)
    ]
    return Dataset(
        samples=tuple(samples),
        actions={a: ActionRef(a, m) for a, m in actions.items()},
        matches={m: MatchMeta(m, year, ta, tb) for m, (year, ta, tb) in matches.items()},
        features=np.asarray(features, dtype=np.float32).reshape(len(records), -1),
    ).validate()


@pytest.fixture
def tiny_dataset() -> Dataset:
    """1 場比賽、2 個動作、4 個樣本、8 維特徵"""
    rng = np.random.default_rng(0)
    records = [
        (0, 'a1', 'query'),
        (0, 'a1', 'gallery'),
        (1, 'a2', 'query'),
        (1, 'a2', 'gallery'),
    ]
    return make_dataset(records, rng.normal(size=(4, 8)),
                        matches={'m1': (2020, 'Red', 'Blue')},
                        actions={'a1': 'm1', 'a2': 'm1'})


SMALL_GEN = GenConfig(
    n_teams=4,
    matches_per_pair=2,
    actions_per_match=2,
    players_per_team=4,
    replays_per_action=2,
    feature_dim=8,
    test_fraction=0.25,
    seed=11,
)


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    """小型合成數據集: 4 隊 × 4 人，12 場比賽"""
    return SyntheticLeagueGenerator(SMALL_GEN).generate()


@pytest.fixture(scope="session")
def default_dataset() -> Dataset:
    """默認配置的合成數據集"""
    return SyntheticLeagueGenerator(GenConfig()).generate()


def records_of(dataset: Dataset) -> List[Tuple[int, str, str]]:
    return [(s.player_id, s.action_id, s.role) for s in dataset.samples]
