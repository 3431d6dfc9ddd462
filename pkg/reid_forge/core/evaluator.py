"""
評估器 - 按動作的 query/gallery 檢索評估
Re-identification evaluator

每個 query 只與同一動作的 gallery 比較；mAP 與 R1 以 0-100 計。
沒有同動作相關 gallery 樣本的 query 不參與兩項指標 (會被計數並記錄)。

oracle_evaluate 是獨立的純 Python 實現 (窮舉距離、樸素排序、直接累加 AP)，
用於與 evaluate_split 逐位比對。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..common.errors import DatasetError, EvaluationError, ShapeError
from ..common.models import Dataset, RankingResult, Sample
from .dataset_io import index_by_action

logger = logging.getLogger(__name__)

Embeddings = Union[np.ndarray, Mapping[str, np.ndarray]]


@dataclass
class ActionMetrics:
    """單個動作的指標"""
    action_id: str
    mAP: float
    R1: float
    n_queries: int
    n_valid: int


@dataclass
class EvaluationResult:
    """評估結果"""
    mAP: float
    R1: float
    n_queries: int
    n_valid: int
    n_excluded: int
    per_action: Dict[str, ActionMetrics] = field(default_factory=dict)
    rankings: List[RankingResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, float]:
        return {
            'mAP': self.mAP,
            'R1': self.R1,
            'n_queries': self.n_queries,
            'n_valid': self.n_valid,
            'n_excluded': self.n_excluded,
        }

    def format_lines(self) -> List[str]:
        """key=value 輸出行，指標保留一位小數"""
        return [
            f"mAP={self.mAP:.1f}",
            f"R1={self.R1:.1f}",
            f"n_queries={self.n_queries}",
            f"n_valid={self.n_valid}",
            f"n_excluded={self.n_excluded}",
        ]


def query_distances(query: np.ndarray, gallery: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """query 到每個 gallery 向量的距離"""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    g = np.asarray(gallery, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != q.shape[0]:
        raise ShapeError('rank_action', q.shape, g.shape)
    if metric == "euclidean":
        diff = g - q
        return np.sqrt((diff * diff).sum(axis=1))
    if metric == "cosine":
        q_norm = np.sqrt((q * q).sum())
        g_norm = np.sqrt((g * g).sum(axis=1))
        if q_norm == 0.0 or np.any(g_norm == 0.0):
            raise EvaluationError("餘弦距離: 存在零範數嵌入")
        return 1.0 - (g @ q) / (g_norm * q_norm)
    raise EvaluationError(f"未知的距離度量: {metric}")


def rank_action(query_emb: np.ndarray, gallery_embs: np.ndarray, metric: str = "euclidean",
                query_id: str = "query", gallery_ids: Optional[Sequence[str]] = None,
                query_label: Optional[int] = None,
                gallery_labels: Optional[Sequence[int]] = None) -> RankingResult:
    """
    按距離升序對一個動作的 gallery 排序 (穩定排序，平局按 gallery 原順序)

    Args:
        query_emb: 查詢嵌入
        gallery_embs: g x d gallery 嵌入
        metric: euclidean / cosine
        query_id / gallery_ids: 樣本標識，默認使用下標
        query_label / gallery_labels: 身份標籤，用於計算相關性
    """
    gallery = np.asarray(gallery_embs, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise EvaluationError("rank_action: gallery 不能為空")
    distances = query_distances(query_emb, gallery, metric)
    order = np.argsort(distances, kind='stable')

    ids = list(gallery_ids) if gallery_ids is not None else [str(i) for i in range(len(gallery))]
    if query_label is not None and gallery_labels is not None:
        labels = np.asarray(gallery_labels)
        relevance = tuple(bool(labels[i] == query_label) for i in order)
    else:
        relevance = (False,) * len(order)
    return RankingResult(
        query_id=query_id,
        gallery_ids=tuple(ids[i] for i in order),
        distances=tuple(float(distances[i]) for i in order),
        relevance=relevance,
    )


def average_precision(result: RankingResult) -> float:
    """AP = (1/R) Σ_k Precision@k * rel(k)"""
    rel = np.asarray(result.relevance, dtype=bool)
    n_relevant = int(rel.sum())
    if n_relevant == 0:
        raise EvaluationError(f"查詢 {result.query_id} 沒有相關的 gallery 樣本")
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, len(rel) + 1)
    return math.fsum(precision[rel].tolist()) / n_relevant


def _resolve(dataset: Dataset, embeddings: Embeddings):
    """返回 sample -> 嵌入向量 的查找函數"""
    if isinstance(embeddings, Mapping):
        def lookup(sample: Sample) -> np.ndarray:
            if sample.sample_id not in embeddings:
                raise DatasetError(f"缺少樣本 {sample.sample_id} 的嵌入")
            return np.asarray(embeddings[sample.sample_id], dtype=np.float64)
        return lookup

    values = np.asarray(embeddings, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != len(dataset):
        raise DatasetError(f"嵌入矩陣形狀 {values.shape} 與樣本數 {len(dataset)} 不一致")
    position_of = dataset.position_of

    def lookup(sample: Sample) -> np.ndarray:
        return values[position_of[sample.sample_id]]
    return lookup


def _metrics(aps: List[float], top1: int) -> tuple:
    n = len(aps)
    if n == 0:
        return float('nan'), float('nan')
    return math.fsum(aps) / n * 100.0, top1 / n * 100.0


def evaluate_split(dataset: Dataset, embeddings: Embeddings, metric: str = "euclidean",
                   split: Optional[str] = None) -> EvaluationResult:
    """
    按動作評估 query/gallery

    Args:
        dataset: 數據集
        embeddings: 與 dataset.samples 對齊的矩陣，或 sample_id -> 向量
        metric: euclidean / cosine
        split: 只評估指定劃分 (test / valid)，None 表示全部非訓練樣本

    Returns:
        EvaluationResult
    """
    lookup = _resolve(dataset, embeddings)
    all_aps: List[float] = []
    all_top1 = 0
    n_queries = 0
    per_action: Dict[str, ActionMetrics] = {}
    rankings: List[RankingResult] = []

    for action_id, (queries, gallery) in index_by_action(dataset).items():
        if split is not None:
            queries = [s for s in queries if s.split == split]
            gallery = [s for s in gallery if s.split == split]
            if not queries and not gallery:
                continue
        n_queries += len(queries)
        aps: List[float] = []
        top1 = 0
        if gallery:
            gallery_embs = np.stack([lookup(s) for s in gallery])
            gallery_ids = [s.sample_id for s in gallery]
            gallery_labels = [s.player_id for s in gallery]
            for query in queries:
                result = rank_action(lookup(query), gallery_embs, metric, query.sample_id,
                                     gallery_ids, query.player_id, gallery_labels)
                rankings.append(result)
                if result.n_relevant == 0:
                    continue
                aps.append(average_precision(result))
                top1 += int(result.relevance[0])

        action_map, action_r1 = _metrics(aps, top1)
        per_action[action_id] = ActionMetrics(action_id, action_map, action_r1, len(queries), len(aps))
        all_aps.extend(aps)
        all_top1 += top1

    mAP, R1 = _metrics(all_aps, all_top1)
    n_excluded = n_queries - len(all_aps)
    if n_excluded:
        logger.warning(f"{n_excluded} 個查詢在同一動作中沒有相關 gallery 樣本，已排除")
    logger.debug(f"評估完成: mAP={mAP:.3f} R1={R1:.3f} ({len(all_aps)}/{n_queries} 個有效查詢)")
    return EvaluationResult(
        mAP=mAP, R1=R1, n_queries=n_queries, n_valid=len(all_aps), n_excluded=n_excluded,
        per_action=per_action, rankings=rankings,
    )


# ----------------------------------------------------------------------
# 參照實現

def _oracle_distance(a: List[float], b: List[float], metric: str) -> float:
    if len(a) != len(b):
        raise ShapeError('oracle_evaluate', (len(a),), (len(b),))
    if metric == "euclidean":
        return math.sqrt(sum((x - y) * (x - y) for x, y in zip(a, b)))
    if metric == "cosine":
        dot = sum(x * y for x, y in zip(a, b))
        norm_a = math.sqrt(sum(x * x for x in a))
        norm_b = math.sqrt(sum(y * y for y in b))
        if norm_a == 0.0 or norm_b == 0.0:
            raise EvaluationError("餘弦距離: 存在零範數嵌入")
        return 1.0 - dot / (norm_a * norm_b)
    raise EvaluationError(f"未知的距離度量: {metric}")


def oracle_evaluate(dataset: Dataset, embeddings: Embeddings, metric: str = "euclidean",
                    split: Optional[str] = None) -> EvaluationResult:
    """evaluate_split 的暴力參照實現"""
    lookup = _resolve(dataset, embeddings)

    groups: Dict[str, Dict[str, List[Sample]]] = {}
    for sample in dataset.samples:
        if sample.role == 'train' or (split is not None and sample.split != split):
            continue
        group = groups.setdefault(sample.action_id, {'query': [], 'gallery': []})
        group[sample.role].append(sample)

    all_aps: List[float] = []
    all_top1 = 0
    n_queries = 0
    per_action: Dict[str, ActionMetrics] = {}
    for action_id, group in groups.items():
        gallery = [(s, lookup(s).tolist()) for s in group['gallery']]
        aps: List[float] = []
        top1 = 0
        for query in group['query']:
            n_queries += 1
            q = lookup(query).tolist()
            table = [(_oracle_distance(q, vec, metric), i) for i, (_, vec) in enumerate(gallery)]
            ranked = sorted(table)
            relevance = [gallery[i][0].player_id == query.player_id for _, i in ranked]
            n_relevant = sum(relevance)
            if n_relevant == 0:
                continue
            precisions = []
            hits = 0
            for k, rel in enumerate(relevance, start=1):
                if rel:
                    hits += 1
                    precisions.append(hits / k)
            aps.append(math.fsum(precisions) / n_relevant)
            top1 += int(relevance[0])

        action_map, action_r1 = _metrics(aps, top1)
        per_action[action_id] = ActionMetrics(action_id, action_map, action_r1, len(group['query']), len(aps))
        all_aps.extend(aps)
        all_top1 += top1

    mAP, R1 = _metrics(all_aps, all_top1)
    return EvaluationResult(
        mAP=mAP, R1=R1, n_queries=n_queries, n_valid=len(all_aps),
        n_excluded=n_queries - len(all_aps), per_action=per_action,
    )
