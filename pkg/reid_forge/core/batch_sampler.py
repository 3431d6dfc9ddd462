"""
批次採樣器 - 隨機 P×K 採樣與層級採樣
Batch samplers

層級 (從種子樣本出發，逐級放寬):
    I    同一動作
    II   同一場比賽
    III  同一對球隊、同一年
    IV   同一對球隊、任意年份
    V    至少一支共同球隊、同一年
    VI   至少一支共同球隊、任意年份
    VII  全部樣本

第 ℓ 級的集合包含所有更低級別的集合，因此謂詞單調。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple, Union

import numpy as np

from ..common.errors import InsufficientIdentitiesError, SamplingError
from ..common.models import LEVELS, Batch, Dataset, MatchMeta, Sample
from ..config.config_manager import BatchSpec

logger = logging.getLogger(__name__)

Level = Union[str, int]
SampleWithMatch = Tuple[Sample, MatchMeta]


def level_index(level: Level) -> int:
    """層級名稱或序號 -> 1..7"""
    if isinstance(level, str):
        if level not in LEVELS:
            raise SamplingError(f"未知的層級: {level}")
        return LEVELS.index(level) + 1
    if not 1 <= int(level) <= len(LEVELS):
        raise SamplingError(f"層級序號必須在 1..7 之間: {level}")
    return int(level)


def minimal_level(seed: SampleWithMatch, candidate: SampleWithMatch) -> int:
    """候選樣本相對種子樣本成立的最低層級 (1..7)"""
    seed_sample, seed_match = seed
    cand_sample, cand_match = candidate
    if seed_sample.action_id == cand_sample.action_id:
        return 1
    if seed_match.match_id == cand_match.match_id:
        return 2
    same_year = seed_match.year == cand_match.year
    seed_teams, cand_teams = seed_match.team_keys, cand_match.team_keys
    if seed_teams == cand_teams:
        return 3 if same_year else 4
    if set(seed_teams) & set(cand_teams):
        return 5 if same_year else 6
    return 7


def level_predicate(level: Level, seed: SampleWithMatch, candidate: SampleWithMatch) -> bool:
    """候選樣本是否屬於種子樣本第 level 級的分組"""
    return minimal_level(seed, candidate) <= level_index(level)


def levels_against(codes: Dict[str, np.ndarray], seed: int, others: np.ndarray) -> np.ndarray:
    """
    向量化版本的 minimal_level

    Args:
        codes: Dataset.hierarchy_codes 或其子集
        seed: 種子樣本在 codes 中的下標
        others: 候選樣本下標

    Returns:
        每個候選樣本的最低層級
    """
    lo, hi = codes['team_lo'][others], codes['team_hi'][others]
    seed_lo, seed_hi = codes['team_lo'][seed], codes['team_hi'][seed]
    same_year = codes['year'][others] == codes['year'][seed]
    same_pair = (lo == seed_lo) & (hi == seed_hi)
    intersect = (lo == seed_lo) | (lo == seed_hi) | (hi == seed_lo) | (hi == seed_hi)

    levels = np.full(len(others), 7, dtype=np.int64)
    levels[intersect] = 6
    levels[intersect & same_year] = 5
    levels[same_pair] = 4
    levels[same_pair & same_year] = 3
    levels[codes['match'][others] == codes['match'][seed]] = 2
    levels[codes['action'][others] == codes['action'][seed]] = 1
    return levels


def _train_view(dataset: Dataset, spec: BatchSpec) -> Tuple[np.ndarray, np.ndarray]:
    errors = spec.validate()
    if errors:
        raise SamplingError("; ".join(errors))
    positions = dataset.positions(role='train')
    labels = dataset.player_ids[positions] if len(positions) else np.zeros(0, dtype=np.int64)
    n_ids = np.unique(labels).size
    if n_ids < spec.m:
        raise InsufficientIdentitiesError(f"訓練集只有 {n_ids} 個身份，少於每批需要的 M={spec.m}")
    return positions, labels


def _take_k(rng: np.random.Generator, candidates: np.ndarray, k: int) -> np.ndarray:
    """取 K 個；不足 K 個時有放回補齊"""
    if len(candidates) >= k:
        return candidates[:k]
    extra = rng.choice(candidates, size=k - len(candidates), replace=True)
    return np.concatenate([candidates, extra])


class RandomBatchSampler:
    """
    常規 P×K 採樣: 每個 epoch 打亂身份，每批取 M 個不重複身份，
    每個身份取 K 個樣本 (樣本不足 K 個時有放回)
    """

    def __init__(self, dataset: Dataset, spec: BatchSpec, seed: int):
        self.dataset = dataset
        self.spec = spec
        self.seed = seed
        self.logger = logging.getLogger(__name__)

        positions, labels = _train_view(dataset, spec)
        self.identities = np.unique(labels)
        self.by_identity = {int(pid): positions[labels == pid] for pid in self.identities}

    def batches_per_epoch(self) -> int:
        return len(self.identities) // self.spec.m

    def iter_epoch(self, epoch: int = 0) -> Iterator[Batch]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(self.identities)
        samples = self.dataset.samples
        k, m = self.spec.k, self.spec.m

        for b in range(self.batches_per_epoch()):
            entries = []
            for pid in order[b * m:(b + 1) * m]:
                owned = self.by_identity[int(pid)]
                chosen = rng.choice(owned, size=k, replace=len(owned) < k)
                entries.extend((samples[p].sample_id, int(pid)) for p in chosen)
            yield Batch(entries=tuple(entries))


class EpochPool:
    """
    一個 epoch 內可用的訓練樣本池

    只會縮小；下一個 epoch 重新初始化
    """

    def __init__(self, dataset: Dataset, positions: np.ndarray, rng: np.random.Generator):
        self.dataset = dataset
        self.positions = positions
        self.rng = rng
        self._mask = np.ones(len(positions), dtype=bool)

    @property
    def available(self) -> Set[str]:
        samples = self.dataset.samples
        return {samples[p].sample_id for p in self.positions[self._mask]}

    @property
    def rng_state(self) -> dict:
        return self.rng.bit_generator.state

    def indices(self) -> np.ndarray:
        """可用樣本在訓練視圖中的下標"""
        return np.flatnonzero(self._mask)

    def remove(self, local: Iterable[int]):
        self._mask[np.fromiter(local, dtype=np.int64)] = False

    def __len__(self) -> int:
        return int(self._mask.sum())


class HierarchicalBatchSampler:
    """
    層級採樣器

    每批: 從樣本池隨機取種子樣本，按層級 I..VII 逐級收集身份 (同級內隨機打亂)，
    直到選夠 M 個身份；每個身份優先取層級最低的 K 個池內樣本；
    用過的樣本移出樣本池，池內身份不足 M 個時本 epoch 結束。
    """

    def __init__(self, dataset: Dataset, spec: BatchSpec, seed: int):
        self.dataset = dataset
        self.spec = spec
        self.seed = seed
        self.logger = logging.getLogger(__name__)

        self.positions, self.labels = _train_view(dataset, spec)
        self.codes = {name: values[self.positions] for name, values in dataset.hierarchy_codes.items()}
        self.pool: Optional[EpochPool] = None

    def iter_epoch(self, epoch: int = 0) -> Iterator[Batch]:
        """重新初始化樣本池並返回本 epoch 的批次迭代器"""
        rng = np.random.default_rng([self.seed, epoch])
        self.pool = EpochPool(self.dataset, self.positions, rng)
        return self._drain(self.pool, epoch)

    def _drain(self, pool: EpochPool, epoch: int) -> Iterator[Batch]:
        count = 0
        while True:
            batch = self.next_batch(pool)
            if batch is None:
                break
            count += 1
            yield batch
        self.logger.debug(f"epoch {epoch}: 層級採樣產生 {count} 個批次，剩餘 {len(pool)} 個樣本")

    def identity_levels(self, seed_local: int, available: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        池內每個身份相對種子樣本的最低層級

        Returns:
            (每個可用樣本的層級, 身份列表, 每個身份的最低層級)
        """
        levels = levels_against(self.codes, seed_local, available)
        ids, inverse = np.unique(self.labels[available], return_inverse=True)
        id_levels = np.full(len(ids), len(LEVELS) + 1, dtype=np.int64)
        np.minimum.at(id_levels, inverse, levels)
        return levels, ids, id_levels

    def next_batch(self, pool: EpochPool) -> Optional[Batch]:
        k, m = self.spec.k, self.spec.m
        rng = pool.rng
        available = pool.indices()
        pool_labels = self.labels[available]
        if np.unique(pool_labels).size < m:
            return None

        seed_local = int(available[rng.integers(len(available))])
        seed_id = int(self.labels[seed_local])
        levels, ids, id_levels = self.identity_levels(seed_local, available)

        selected: List[Tuple[int, int]] = [(seed_id, 1)]
        for level in range(1, len(LEVELS) + 1):
            if len(selected) >= m:
                break
            candidates = rng.permutation(ids[(id_levels == level) & (ids != seed_id)])
            selected.extend((int(pid), level) for pid in candidates[:m - len(selected)])

        samples = self.dataset.samples
        entries, trace, used = [], [], set()
        for pid, level in selected:
            owned = pool_labels == pid
            mine = available[owned]
            keys = rng.random(len(mine))
            order = np.lexsort((keys, mine != seed_local, levels[owned]))
            chosen = _take_k(rng, mine[order], k)
            used.update(int(i) for i in chosen)
            entries.extend((samples[self.positions[i]].sample_id, pid) for i in chosen)
            trace.extend([LEVELS[level - 1]] * k)

        pool.remove(sorted(used))
        return Batch(
            entries=tuple(entries),
            seed_sample=samples[self.positions[seed_local]].sample_id,
            level_trace=tuple(trace),
        )


def make_sampler(kind: str, dataset: Dataset, spec: BatchSpec, seed: int):
    """按名稱創建採樣器 (random / hierarchical，hier 為簡寫)"""
    if kind == 'random':
        return RandomBatchSampler(dataset, spec, seed)
    if kind in ('hierarchical', 'hier'):
        return HierarchicalBatchSampler(dataset, spec, seed)
    raise SamplingError(f"未知的採樣器: {kind}")


def random_batches(dataset: Dataset, spec: BatchSpec, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """一個 epoch 的隨機 P×K 批次 (惰性)"""
    return RandomBatchSampler(dataset, spec, seed).iter_epoch(epoch)


def hierarchical_batches(dataset: Dataset, spec: BatchSpec, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """一個 epoch 的層級採樣批次 (惰性)"""
    return HierarchicalBatchSampler(dataset, spec, seed).iter_epoch(epoch)


@dataclass
class BatchStats:
    """批次內樣本對的分佈統計 (按批次平均)"""
    n_batches: int
    same_action: float
    same_match: float
    team_intersect: float
    cross_identity_same_match: float
    level_histogram: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, float]:
        record = {
            'n_batches': self.n_batches,
            'same_action': self.same_action,
            'same_match': self.same_match,
            'team_intersect': self.team_intersect,
            'cross_identity_same_match': self.cross_identity_same_match,
        }
        for level, fraction in self.level_histogram.items():
            record[f'level_{level}'] = fraction
        return record


def batch_stats(batches: Iterable[Batch], dataset: Dataset) -> BatchStats:
    """統計批次內樣本對共享動作 / 比賽 / 球隊的比例"""
    batches = list(batches)
    if not batches:
        raise SamplingError("batch_stats 需要至少一個批次")

    codes = dataset.hierarchy_codes
    position_of = dataset.position_of
    per_batch = {'same_action': [], 'same_match': [], 'team_intersect': [], 'cross_identity_same_match': []}
    level_counts = {level: 0 for level in LEVELS}
    traced = 0

    for batch in batches:
        pos = np.array([position_of[s] for s in batch.sample_ids], dtype=np.int64)
        ii, jj = np.triu_indices(len(pos), k=1)
        a, b = pos[ii], pos[jj]
        same_action = codes['action'][a] == codes['action'][b]
        same_match = codes['match'][a] == codes['match'][b]
        lo_a, hi_a, lo_b, hi_b = codes['team_lo'][a], codes['team_hi'][a], codes['team_lo'][b], codes['team_hi'][b]
        intersect = (lo_a == lo_b) | (lo_a == hi_b) | (hi_a == lo_b) | (hi_a == hi_b)
        labels = np.asarray(batch.labels)
        cross = labels[ii] != labels[jj]

        per_batch['same_action'].append(same_action.mean() if len(ii) else 0.0)
        per_batch['same_match'].append(same_match.mean() if len(ii) else 0.0)
        per_batch['team_intersect'].append(intersect.mean() if len(ii) else 0.0)
        per_batch['cross_identity_same_match'].append(same_match[cross].mean() if cross.any() else 0.0)

        for level in batch.level_trace:
            level_counts[level] += 1
        traced += len(batch.level_trace)

    histogram = {level: count / traced for level, count in level_counts.items()} if traced else {}
    return BatchStats(
        n_batches=len(batches),
        same_action=float(np.mean(per_batch['same_action'])),
        same_match=float(np.mean(per_batch['same_match'])),
        team_intersect=float(np.mean(per_batch['team_intersect'])),
        cross_identity_same_match=float(np.mean(per_batch['cross_identity_same_match'])),
        level_histogram=histogram,
    )
