"""
數據集模型
球隊、比賽、動作 (action)、樣本與數據集本身

樣本的 player_id 在全數據集中存儲，但在 query/gallery 中只在同一動作內可比較，
評估器負責按動作劃分，模型本身不禁止跨動作重用身份。
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DatasetError

ROLES = ('train', 'query', 'gallery')
SPLITS = ('train', 'valid', 'test')


def normalize_team(name: str) -> str:
    """球隊名稱比較前統一為小寫並去除首尾空白"""
    return name.strip().lower()


@dataclass(frozen=True)
class MatchMeta:
    """比賽元數據: 層級採樣 II-VI 的分組鍵"""
    match_id: str
    year: int
    team_a: str
    team_b: str

    @property
    def team_keys(self) -> Tuple[str, str]:
        """無序球隊對 (排序後的標準化名稱)"""
        a, b = normalize_team(self.team_a), normalize_team(self.team_b)
        return (a, b) if a <= b else (b, a)

    def validate(self) -> List[str]:
        errors = []
        if not self.match_id:
            errors.append("match_id 不能為空")
        if self.year <= 0:
            errors.append(f"比賽 {self.match_id}: year 必須大於0 ({self.year})")
        if normalize_team(self.team_a) == normalize_team(self.team_b):
            errors.append(f"比賽 {self.match_id}: team_a 與 team_b 相同 ({self.team_a})")
        return errors

    def to_dict(self):
        return {
            "match_id": self.match_id,
            "year": self.year,
            "team_a": self.team_a,
            "team_b": self.team_b,
        }


@dataclass(frozen=True)
class ActionRef:
    """比賽中的一個動作 (精彩時刻)"""
    action_id: str
    match_id: str

    def to_dict(self):
        return {"action_id": self.action_id, "match_id": self.match_id}


@dataclass(frozen=True)
class Sample:
    """一個球員檢測結果"""
    sample_id: str
    player_id: int
    action_id: str
    role: str  # train / query / gallery
    feature_index: int
    split: str = "train"  # train / valid / test

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "player_id": self.player_id,
            "action_id": self.action_id,
            "role": self.role,
            "feature_index": self.feature_index,
            "split": self.split,
        }


@dataclass(eq=False)
class Dataset:
    """
    完整數據集

    Args:
        samples: 樣本序列
        actions: action_id -> ActionRef
        matches: match_id -> MatchMeta
        features: (n_samples, feature_dim) float32 原始特徵
    """
    samples: Tuple[Sample, ...]
    actions: Dict[str, ActionRef]
    matches: Dict[str, MatchMeta]
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.samples = tuple(self.samples)
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, 0)
        if features.ndim != 2:
            raise DatasetError(f"特徵矩陣必須是二維，實際維度 {features.ndim}")
        features.setflags(write=False)
        self.features = features

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.samples == other.samples
            and self.actions == other.actions
            and self.matches == other.matches
            and self.features.shape == other.features.shape
            and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
        )

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def validate(self) -> "Dataset":
        """校驗所有交叉引用與不變量，失敗時拋出 DatasetError"""
        seen_matches = set()
        for match_id, match in self.matches.items():
            if match_id != match.match_id:
                raise DatasetError(f"比賽鍵 {match_id} 與記錄 {match.match_id} 不一致")
            problems = match.validate()
            if problems:
                raise DatasetError(problems[0])
            seen_matches.add(match_id)

        for action_id, action in self.actions.items():
            if action_id != action.action_id:
                raise DatasetError(f"動作鍵 {action_id} 與記錄 {action.action_id} 不一致")
            if action.match_id not in self.matches:
                raise DatasetError(f"動作 {action_id} 引用了不存在的比賽: {action.match_id}")

        if self.features.shape[0] != len(self.samples):
            raise DatasetError(
                f"特徵行數 {self.features.shape[0]} 與樣本數 {len(self.samples)} 不一致")

        sample_ids = set()
        for sample in self.samples:
            if sample.sample_id in sample_ids:
                raise DatasetError(f"重複的 sample_id: {sample.sample_id}")
            sample_ids.add(sample.sample_id)
            if sample.player_id < 0:
                raise DatasetError(f"樣本 {sample.sample_id}: player_id 不能為負 ({sample.player_id})")
            if sample.action_id not in self.actions:
                raise DatasetError(f"樣本 {sample.sample_id} 引用了不存在的動作: {sample.action_id}")
            if sample.role not in ROLES:
                raise DatasetError(f"樣本 {sample.sample_id}: 未知角色 {sample.role}")
            if sample.split not in SPLITS:
                raise DatasetError(f"樣本 {sample.sample_id}: 未知劃分 {sample.split}")
            if (sample.role == 'train') != (sample.split == 'train'):
                raise DatasetError(
                    f"樣本 {sample.sample_id}: 角色 {sample.role} 與劃分 {sample.split} 不一致")
            if not 0 <= sample.feature_index < self.features.shape[0]:
                raise DatasetError(
                    f"樣本 {sample.sample_id}: feature_index {sample.feature_index} 越界")
        return self

    # ------------------------------------------------------------------
    # 派生索引 (數據集加載後不可變，可安全緩存)

    @cached_property
    def position_of(self) -> Dict[str, int]:
        """sample_id -> 在 samples 中的位置"""
        return {s.sample_id: i for i, s in enumerate(self.samples)}

    @cached_property
    def player_ids(self) -> np.ndarray:
        return np.array([s.player_id for s in self.samples], dtype=np.int64)

    @cached_property
    def feature_indices(self) -> np.ndarray:
        return np.array([s.feature_index for s in self.samples], dtype=np.int64)

    @cached_property
    def hierarchy_codes(self) -> Dict[str, np.ndarray]:
        """
        每個樣本的層級分組編碼 (整數)，供採樣器向量化比較

        Returns:
            action / match / year / team_lo / team_hi 五個等長數組
        """
        team_codes: Dict[str, int] = {}
        for match in self.matches.values():
            for key in match.team_keys:
                team_codes.setdefault(key, len(team_codes))
        action_codes = {a: i for i, a in enumerate(self.actions)}
        match_codes = {m: i for i, m in enumerate(self.matches)}

        n = len(self.samples)
        codes = {name: np.zeros(n, dtype=np.int64)
                 for name in ('action', 'match', 'year', 'team_lo', 'team_hi')}
        for i, sample in enumerate(self.samples):
            action = self.actions[sample.action_id]
            match = self.matches[action.match_id]
            lo, hi = match.team_keys
            codes['action'][i] = action_codes[sample.action_id]
            codes['match'][i] = match_codes[match.match_id]
            codes['year'][i] = match.year
            codes['team_lo'][i] = team_codes[lo]
            codes['team_hi'][i] = team_codes[hi]
        return codes

    def match_of(self, sample: Sample) -> MatchMeta:
        return self.matches[self.actions[sample.action_id].match_id]

    def positions(self, role: Optional[str] = None, split: Optional[str] = None) -> np.ndarray:
        """按角色 / 劃分篩選樣本位置"""
        return np.array([
            i for i, s in enumerate(self.samples)
            if (role is None or s.role == role) and (split is None or s.split == split)
        ], dtype=np.int64)

    def feature_rows(self, positions: Sequence[int]) -> np.ndarray:
        """取樣本位置對應的原始特徵，轉為 float64"""
        idx = self.feature_indices[np.asarray(positions, dtype=np.int64)]
        return self.features[idx].astype(np.float64)


LEVELS = ('I', 'II', 'III', 'IV', 'V', 'VI', 'VII')


@dataclass(frozen=True)
class Batch:
    """
    一個訓練批次: K*M 個 (sample_id, player_id) 條目

    層級採樣時 seed_sample 為種子樣本，level_trace 為每個條目所屬身份的選取層級 (I..VII)
    """
    entries: Tuple[Tuple[str, int], ...]
    seed_sample: Optional[str] = None
    level_trace: Tuple[str, ...] = ()

    @property
    def sample_ids(self) -> List[str]:
        return [sample_id for sample_id, _ in self.entries]

    @property
    def labels(self) -> List[int]:
        return [player_id for _, player_id in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def check(self, k: int, m: int) -> List[str]:
        """返回違反 K/M 結構的問題列表"""
        problems = []
        if len(self.entries) != k * m:
            problems.append(f"批次長度 {len(self.entries)} != K*M = {k * m}")
        counts: Dict[int, int] = {}
        for _, player_id in self.entries:
            counts[player_id] = counts.get(player_id, 0) + 1
        if len(counts) != m:
            problems.append(f"身份數 {len(counts)} != M = {m}")
        bad = {pid: c for pid, c in counts.items() if c != k}
        if bad:
            problems.append(f"以下身份的樣本數不等於 K={k}: {bad}")
        if self.level_trace and len(self.level_trace) != len(self.entries):
            problems.append("level_trace 長度與條目數不一致")
        return problems


@dataclass(frozen=True)
class RankingResult:
    """單個查詢的排序結果 (距離升序)"""
    query_id: str
    gallery_ids: Tuple[str, ...]
    distances: Tuple[float, ...]
    relevance: Tuple[bool, ...]

    @property
    def n_relevant(self) -> int:
        return sum(self.relevance)
