"""
合成數據生成器測試
"""

from collections import Counter, defaultdict
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from reid_forge.common.errors import ConfigError
from reid_forge.config.config_manager import GenConfig
from reid_forge.core.evaluator import evaluate_split
from reid_forge.core.synth_generator import SyntheticLeagueGenerator, generate
from reid_forge.tests.conftest import SMALL_GEN


def test_same_seed_is_bit_identical():
    assert generate(SMALL_GEN) == generate(SMALL_GEN)


def test_different_seed_changes_features():
    other = replace(SMALL_GEN, seed=SMALL_GEN.seed + 1)
    assert generate(other) != generate(SMALL_GEN)


def test_schedule_shape(small_dataset):
    """4 隊兩兩比賽，每對 2 場"""
    cfg = SMALL_GEN
    assert len(small_dataset.matches) == 6 * cfg.matches_per_pair
    assert len(small_dataset.actions) == len(small_dataset.matches) * cfg.actions_per_match
    per_action = len(small_dataset) // len(small_dataset.actions)
    assert per_action == 2 * cfg.players_per_team * (1 + cfg.replays_per_action)
    years = {m.year for m in small_dataset.matches.values()}
    assert years == {cfg.base_year, cfg.base_year + 1}


def test_splits_follow_whole_matches(small_dataset):
    """同一場比賽的樣本屬於同一劃分"""
    split_of_match = defaultdict(set)
    for sample in small_dataset.samples:
        split_of_match[small_dataset.match_of(sample).match_id].add(sample.split)
    assert all(len(splits) == 1 for splits in split_of_match.values())
    counts = Counter(next(iter(s)) for s in split_of_match.values())
    assert counts['test'] == round(SMALL_GEN.test_fraction * len(small_dataset.matches))
    assert counts['train'] + counts['test'] == len(small_dataset.matches)


def test_roles_per_split(small_dataset):
    """測試動作: 每名球員 1 個 query + replays 個 gallery"""
    for sample in small_dataset.samples:
        if sample.split == 'train':
            assert sample.role == 'train'
        else:
            assert sample.role in ('query', 'gallery')
    per_player_action = Counter(
        (s.action_id, s.player_id, s.role) for s in small_dataset.samples if s.split == 'test')
    for (_, _, role), count in per_player_action.items():
        assert count == (1 if role == 'query' else SMALL_GEN.replays_per_action)


def test_valid_split():
    dataset = generate(GenConfig(n_teams=4, players_per_team=2, feature_dim=4,
                                 test_fraction=0.25, valid_fraction=0.25, seed=3))
    splits = {s.split for s in dataset.samples}
    assert splits == {'train', 'valid', 'test'}


def test_players_belong_to_their_teams(small_dataset):
    """球員只出現在自己球隊的比賽中"""
    for sample in small_dataset.samples:
        team = sample.player_id // SMALL_GEN.players_per_team
        match = small_dataset.match_of(sample)
        assert f"team_{team:02d}" in (match.team_a, match.team_b)


def test_referees_are_unique_per_match():
    cfg = GenConfig(n_teams=3, players_per_team=2, feature_dim=6, referees_per_match=1, seed=5)
    dataset = generate(cfg)
    n_players = cfg.n_teams * cfg.players_per_team
    referee_matches = defaultdict(set)
    for sample in dataset.samples:
        if sample.player_id >= n_players:
            referee_matches[sample.player_id].add(dataset.match_of(sample).match_id)
    assert len(referee_matches) == len(dataset.matches)
    assert all(len(m) == 1 for m in referee_matches.values())


def test_referee_kit_is_shared_across_matches():
    """裁判圍繞同一個基向量分佈，彼此比球隊之間更接近"""
    cfg = GenConfig(n_teams=4, players_per_team=3, feature_dim=16, referees_per_match=2,
                    view_noise=0.0, occlusion_prob=0.0, kit_scale=0.0, player_scale=0.2, seed=9)
    dataset = generate(cfg)
    n_players = cfg.n_teams * cfg.players_per_team
    referees = dataset.positions()[dataset.player_ids >= n_players]
    players = dataset.positions()[dataset.player_ids < n_players]
    ref_spread = np.std(dataset.feature_rows(referees), axis=0).mean()
    all_spread = np.std(dataset.feature_rows(players), axis=0).mean()
    assert ref_spread < all_spread


def test_visible_fraction_limits_participants():
    cfg = GenConfig(n_teams=2, players_per_team=5, feature_dim=4, visible_fraction=0.5,
                    replays_per_action=1, seed=2)
    dataset = generate(cfg)
    per_action = Counter(s.action_id for s in dataset.samples)
    assert set(per_action.values()) == {5 * 2}


def test_noise_free_features_give_perfect_retrieval():
    cfg = GenConfig(n_teams=3, players_per_team=4, feature_dim=8, view_noise=0.0,
                    occlusion_prob=0.0, test_fraction=0.5, seed=4)
    dataset = generate(cfg)
    result = evaluate_split(dataset, dataset.feature_rows(np.arange(len(dataset))))
    assert result.n_valid == result.n_queries > 0
    assert result.mAP == 100.0
    assert result.R1 == 100.0


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        SyntheticLeagueGenerator(GenConfig(n_teams=1))
    with pytest.raises(ConfigError):
        SyntheticLeagueGenerator(GenConfig(test_fraction=0.8, valid_fraction=0.5))


def test_player_offsets_follow_configured_normal():
    """沒有球隊、球衣和視角噪聲時特徵即球員偏移 N(0, player_scale^2)"""
    cfg = GenConfig(team_scale=0.0, kit_scale=0.0, view_noise=0.0, occlusion_prob=0.0,
                    player_scale=2.0, seed=21)
    dataset = generate(cfg)
    first = {}
    for i, sample in enumerate(dataset.samples):
        first.setdefault(sample.player_id, i)
    values = dataset.feature_rows(sorted(first.values())).ravel() / cfg.player_scale
    assert values.size == cfg.n_teams * cfg.players_per_team * cfg.feature_dim
    assert stats.kstest(values, 'norm').pvalue > 1e-3


def test_replay_perturbation_scale():
    """回放幀與動作幀之差服從 N(0, view_noise^2)"""
    cfg = GenConfig(view_noise=0.5, occlusion_prob=0.0, seed=22)
    dataset = generate(cfg)
    groups = defaultdict(list)
    for i, sample in enumerate(dataset.samples):
        groups[(sample.action_id, sample.player_id)].append(i)
    diffs = []
    for rows in groups.values():
        frames = dataset.feature_rows(rows)
        diffs.append((frames[1] - frames[0]) / cfg.view_noise)
    assert stats.kstest(np.concatenate(diffs), 'norm').pvalue > 1e-3


def test_hand_count_single_match():
    """2 隊 × 3 人，1 場 1 個動作: 6 個身份、6 個 query、12 個 gallery"""
    cfg = GenConfig(n_teams=2, players_per_team=3, actions_per_match=1, replays_per_action=2,
                    matches_per_pair=1, feature_dim=4, test_fraction=1.0, seed=1)
    dataset = generate(cfg)
    assert len(dataset.matches) == 1
    roles = Counter(s.role for s in dataset.samples)
    assert len({s.player_id for s in dataset.samples}) == 6
    assert (roles['query'], roles['gallery'], roles['train']) == (6, 12, 0)


def test_zero_noise_samples_identical_within_match():
    cfg = GenConfig(view_noise=0.0, occlusion_prob=0.0, seed=13)
    dataset = generate(cfg)
    rows = defaultdict(list)
    for i, sample in enumerate(dataset.samples):
        rows[(dataset.match_of(sample).match_id, sample.player_id)].append(i)
    assert all(len(r) == cfg.actions_per_match * (1 + cfg.replays_per_action) for r in rows.values())
    for r in rows.values():
        assert np.unique(dataset.feature_rows(r), axis=0).shape[0] == 1


def test_nearest_centroid_is_perfect_within_action():
    """無遮擋、噪聲遠小於球員偏移時，按動作的最近質心分類全部正確"""
    cfg = GenConfig(view_noise=0.1, occlusion_prob=0.0, seed=17)
    dataset = generate(cfg)
    by_action = defaultdict(list)
    for i, sample in enumerate(dataset.samples):
        by_action[sample.action_id].append(i)
    for rows in by_action.values():
        labels = dataset.player_ids[rows]
        features = dataset.feature_rows(rows).astype(np.float64)
        ids = np.unique(labels)
        centroids = np.stack([features[labels == pid].mean(axis=0) for pid in ids])
        distances = ((features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(ids[distances.argmin(axis=1)], labels)


def test_within_team_pairs_are_closer_than_between_team_pairs(default_dataset):
    """team_scale > player_scale: 隊內距離顯著小於隊間距離 (單側檢驗，各 1000 對)"""
    cfg = GenConfig()
    assert cfg.team_scale > cfg.player_scale
    rng = np.random.default_rng(0)
    teams = default_dataset.player_ids // cfg.players_per_team
    features = default_dataset.feature_rows(np.arange(len(default_dataset))).astype(np.float64)
    within, between = [], []
    while len(within) < 1000 or len(between) < 1000:
        a, b = (int(i) for i in rng.integers(0, len(default_dataset), size=2))
        if default_dataset.player_ids[a] == default_dataset.player_ids[b]:
            continue
        distance = float(np.linalg.norm(features[a] - features[b]))
        target = within if teams[a] == teams[b] else between
        if len(target) < 1000:
            target.append(distance)
    assert np.mean(within) < np.mean(between)
    assert stats.mannwhitneyu(within, between, alternative='less').pvalue < 1e-3
