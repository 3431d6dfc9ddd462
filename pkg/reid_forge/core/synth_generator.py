"""
合成數據生成器 - SyntheticLeagueGenerator
生成帶有球隊/比賽/動作層級的合成球員特徵數據集

幾何結構:
- 球隊基向量均勻分佈在半徑 team_scale 的球面上 (同隊球衣相似)
- 球員偏移為 N(0, player_scale^2)
- 每場比賽每支球隊一個球衣偏移 N(0, kit_scale^2)
- 動作幀 = 乾淨向量 + N(0, view_noise^2)，回放幀 = 動作幀 + N(0, view_noise^2)
- 以 occlusion_prob 的概率與同一動作中另一名球員的動作幀按 occlusion_blend 混合 (遮擋)
"""

import logging
from itertools import combinations
from typing import Dict, List, Tuple

import numpy as np

from ..common.errors import ConfigError
from ..common.models import ActionRef, Dataset, MatchMeta, Sample
from ..config.config_manager import GenConfig

REFEREE_TEAM = "referee"


class SyntheticLeagueGenerator:
    """合成聯賽數據生成器"""

    def __init__(self, config: GenConfig):
        """
        初始化生成器

        Args:
            config: 生成配置
        """
        errors = config.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.rng = np.random.default_rng(config.seed)

    # ------------------------------------------------------------------
    # 幾何

    def _team_bases(self) -> np.ndarray:
        cfg = self.config
        directions = self.rng.normal(size=(cfg.n_teams + 1, cfg.feature_dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        # 最後一行是裁判服
        return directions * cfg.team_scale

    def _schedule(self) -> List[Tuple[MatchMeta, Tuple[int, int]]]:
        """每對球隊安排 matches_per_pair 場比賽，第 j 場在 base_year + j mod n_seasons 年"""
        cfg = self.config
        schedule = []
        for a, b in combinations(range(cfg.n_teams), 2):
            for j in range(cfg.matches_per_pair):
                match = MatchMeta(
                    match_id=f"m{len(schedule):04d}",
                    year=cfg.base_year + j % cfg.n_seasons,
                    team_a=f"team_{a:02d}",
                    team_b=f"team_{b:02d}",
                )
                schedule.append((match, (a, b)))
        return schedule

    def _assign_splits(self, n_matches: int) -> List[str]:
        """按整場比賽劃分 train / valid / test"""
        cfg = self.config
        n_test = max(1, round(cfg.test_fraction * n_matches)) if cfg.test_fraction > 0 else 0
        n_valid = max(1, round(cfg.valid_fraction * n_matches)) if cfg.valid_fraction > 0 else 0
        n_test = min(n_test, n_matches)
        n_valid = min(n_valid, n_matches - n_test)

        splits = ['train'] * n_matches
        order = self.rng.permutation(n_matches)
        for i in order[:n_test]:
            splits[i] = 'test'
        for i in order[n_test:n_test + n_valid]:
            splits[i] = 'valid'
        return splits

    def generate(self) -> Dataset:
        """生成數據集 (相同 seed 結果逐位相同)"""
        cfg = self.config
        n_players = cfg.n_teams * cfg.players_per_team

        bases = self._team_bases()
        offsets = self.rng.normal(0.0, cfg.player_scale, size=(n_players, cfg.feature_dim))
        schedule = self._schedule()
        matches = [match for match, _ in schedule]
        splits = self._assign_splits(len(schedule))

        samples: List[Sample] = []
        actions: Dict[str, ActionRef] = {}
        rows: List[np.ndarray] = []

        for match_idx, ((match, team_idx), split) in enumerate(zip(schedule, splits)):
            kits = {token: self.rng.normal(0.0, cfg.kit_scale, size=cfg.feature_dim)
                    for token in (match.team_a, match.team_b, REFEREE_TEAM)}

            # 參與者: (player_id, 乾淨向量)
            participants: List[Tuple[int, np.ndarray]] = []
            for token, team in zip((match.team_a, match.team_b), team_idx):
                for p in range(cfg.players_per_team):
                    pid = team * cfg.players_per_team + p
                    participants.append((pid, bases[team] + offsets[pid] + kits[token]))
            for r in range(cfg.referees_per_match):
                pid = n_players + match_idx * cfg.referees_per_match + r
                offset = self.rng.normal(0.0, cfg.player_scale, size=cfg.feature_dim)
                participants.append((pid, bases[-1] + offset + kits[REFEREE_TEAM]))

            for a in range(cfg.actions_per_match):
                action_id = f"{match.match_id}_a{a}"
                actions[action_id] = ActionRef(action_id, match.match_id)
                visible = self._visible(len(participants))
                frames = self._action_frames([participants[i][1] for i in visible])

                for slot, i in enumerate(visible):
                    pid = participants[i][0]
                    for replay, vector in enumerate(frames[slot]):
                        if split == 'train':
                            role = 'train'
                        else:
                            role = 'query' if replay == 0 else 'gallery'
                        samples.append(Sample(
                            sample_id=f"s{len(samples):06d}",
                            player_id=pid,
                            action_id=action_id,
                            role=role,
                            feature_index=len(samples),
                            split=split,
                        ))
                        rows.append(vector)

        features = np.asarray(rows, dtype=np.float32).reshape(len(rows), cfg.feature_dim)
        matches_by_id = {m.match_id: m for m in matches}
        dataset = Dataset(samples=tuple(samples), actions=actions, matches=matches_by_id, features=features)
        dataset.validate()

        split_counts = {s: splits.count(s) for s in ('train', 'valid', 'test')}
        self.logger.info(
            f"生成合成數據集: {len(matches)} 場比賽 {split_counts}, {len(actions)} 個動作, "
            f"{len(samples)} 個樣本, 特徵維度 {cfg.feature_dim}")
        return dataset

    def _visible(self, n_participants: int) -> List[int]:
        """本動作中可見的參與者下標 (升序)"""
        fraction = self.config.visible_fraction
        if fraction >= 1.0:
            return list(range(n_participants))
        count = min(n_participants, max(2, int(round(fraction * n_participants))))
        return sorted(int(i) for i in self.rng.choice(n_participants, size=count, replace=False))

    def _action_frames(self, clean: List[np.ndarray]) -> List[List[np.ndarray]]:
        """
        為每個可見球員生成 1 個動作幀 + replays_per_action 個回放幀

        Returns:
            每個球員的幀列表，第0個是動作幀
        """
        cfg = self.config
        noise = cfg.view_noise
        action_frames = [v + self.rng.normal(0.0, noise, size=v.shape) for v in clean]

        frames = []
        for slot, frame in enumerate(action_frames):
            own = [frame] + [frame + self.rng.normal(0.0, noise, size=frame.shape)
                             for _ in range(cfg.replays_per_action)]
            frames.append([self._occlude(v, slot, action_frames) for v in own])
        return frames

    def _occlude(self, vector: np.ndarray, slot: int, action_frames: List[np.ndarray]) -> np.ndarray:
        cfg = self.config
        if len(action_frames) < 2 or self.rng.random() >= cfg.occlusion_prob:
            return vector
        other = int(self.rng.integers(len(action_frames) - 1))
        if other >= slot:
            other += 1
        return (1.0 - cfg.occlusion_blend) * vector + cfg.occlusion_blend * action_frames[other]


def generate(config: GenConfig) -> Dataset:
    """按配置生成合成數據集"""
    return SyntheticLeagueGenerator(config).generate()
