"""
損失函數庫 - 度量學習損失
Loss Library

包含:
- 成對距離 (歐氏 / 餘弦)
- BATCH HARD 困難樣本挖掘
- 三元組損失、三元組-質心損失、質心損失、分類損失
- 加權組合損失

所有損失都通過 numerics 的原語構建，可以反向傳播。
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from ..common.errors import LossError, ShapeError
from ..config.config_manager import LossWeights
from . import numerics as nx
from .numerics import Tensor2

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MiningResult:
    """每個錨點的最難正樣本 P 與最難負樣本 N"""
    positives: np.ndarray
    negatives: np.ndarray
    d_ap: np.ndarray
    d_an: np.ndarray

    def __len__(self) -> int:
        return len(self.positives)


def _labels_array(labels: Sequence[int], n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError('labels', (n,), y.shape)
    return y


def _require_two_identities(y: np.ndarray, op: str):
    if np.unique(y).size < 2:
        raise LossError(f"{op}: 批次中至少需要兩個身份，實際 {np.unique(y).size} 個")


def _check_nonzero_rows(emb: Tensor2):
    norms = np.sqrt((emb.values * emb.values).sum(axis=1))
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise LossError(f"餘弦距離: 第 {int(zero[0])} 行的範數為零")


def pairwise_distances(emb: Tensor2, metric: str = "euclidean") -> Tensor2:
    """
    計算 n x n 成對距離矩陣

    歐氏距離由逐對差向量的平方範數開方得到，因此嚴格對稱且對角線為 0；
    餘弦距離為 1 - 餘弦相似度。
    """
    n = emb.rows
    if n < 1:
        raise ShapeError('pairwise_distances', emb.shape)

    if metric == "euclidean":
        ii, jj = np.divmod(np.arange(n * n), n)
        diff = nx.gather_rows(emb, ii) - nx.gather_rows(emb, jj)
        return nx.reshape(nx.sqrt(nx.squared_norm_rows(diff)), n, n)
    if metric == "cosine":
        _check_nonzero_rows(emb)
        unit = nx.normalize_rows(emb)
        return nx.sub(1.0, unit @ nx.transpose(unit))
    raise LossError(f"未知的距離度量: {metric}")


def batch_hard_mine(distances, labels: Sequence[int]) -> MiningResult:
    """
    BATCH HARD 挖掘

    P 取同身份中距離最大的樣本 (身份只有一個樣本時取自身)，
    N 取不同身份中距離最小的樣本，平局取最小下標。
    """
    d = distances.values if isinstance(distances, Tensor2) else np.asarray(distances, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ShapeError('batch_hard_mine', d.shape)
    y = _labels_array(labels, n)
    _require_two_identities(y, 'batch_hard_mine')

    same = y[:, None] == y[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    singleton = ~pos_mask.any(axis=1)
    pos_mask[singleton] = eye[singleton]

    positives = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    negatives = np.argmin(np.where(~same, d, np.inf), axis=1)
    rows = np.arange(n)
    return MiningResult(
        positives=positives,
        negatives=negatives,
        d_ap=d[rows, positives],
        d_an=d[rows, negatives],
    )


def triplet_terms(emb: Tensor2, labels: Sequence[int], margin: float,
                  metric: str = "euclidean") -> Tensor2:
    """每個錨點的 [m + D(A,P) - D(A,N)]+，返回 n x 1"""
    n = emb.rows
    y = _labels_array(labels, n)
    distances = pairwise_distances(emb, metric)
    mining = batch_hard_mine(distances, y)

    flat = nx.reshape(distances, n * n, 1)
    anchors = np.arange(n)
    d_ap = nx.gather_rows(flat, anchors * n + mining.positives)
    d_an = nx.gather_rows(flat, anchors * n + mining.negatives)
    return nx.relu(nx.add(d_ap - d_an, margin))


def triplet_loss(emb: Tensor2, labels: Sequence[int], margin: float = 0.3,
                 metric: str = "euclidean") -> Tensor2:
    """三元組損失: 錨點項之和"""
    return nx.total(triplet_terms(emb, labels, margin, metric))


def _row_distances(a: Tensor2, b: Tensor2, metric: str) -> Tensor2:
    """a 與 b 對應行之間的距離，返回 n x 1"""
    if metric == "euclidean":
        return nx.sqrt(nx.squared_norm_rows(a - b))
    if metric == "cosine":
        _check_nonzero_rows(a)
        _check_nonzero_rows(b)
        ones = Tensor2(np.ones((a.cols, 1)))
        cos = nx.mul(nx.normalize_rows(a), nx.normalize_rows(b)) @ ones
        return nx.sub(1.0, cos)
    raise LossError(f"未知的距離度量: {metric}")


def _membership(y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    身份成員矩陣

    Returns:
        (排序後的身份, 同身份平均矩陣, 其他樣本平均矩陣)，每行對應一個身份
    """
    ids = np.unique(y)
    inside = (ids[:, None] == y[None, :]).astype(np.float64)
    outside = 1.0 - inside
    inside /= inside.sum(axis=1, keepdims=True)
    outside /= outside.sum(axis=1, keepdims=True)
    return ids, inside, outside


def triplet_centroid_loss(emb: Tensor2, labels: Sequence[int], margin_tc: float = 0.3,
                          metric: str = "euclidean") -> Tensor2:
    """
    三元組-質心損失

    Σ_A [m_tc + D(A, 同身份質心) - D(A, 其他樣本質心)]+，
    同身份質心包含錨點本身。
    """
    y = _labels_array(labels, emb.rows)
    _require_two_identities(y, 'triplet_centroid_loss')
    ids, inside, outside = _membership(y)
    slot = np.searchsorted(ids, y)

    centroid_p = nx.gather_rows(Tensor2(inside) @ emb, slot)
    centroid_n = nx.gather_rows(Tensor2(outside) @ emb, slot)
    d_p = _row_distances(emb, centroid_p, metric)
    d_n = _row_distances(emb, centroid_n, metric)
    return nx.total(nx.relu(nx.add(d_p - d_n, margin_tc)))


def centroid_terms(emb: Tensor2, labels: Sequence[int]) -> Tuple[Tensor2, Tensor2]:
    """每個身份的簇內質心 C_I 與簇外質心 C_II (按身份排序)"""
    y = _labels_array(labels, emb.rows)
    _require_two_identities(y, 'centroid_loss')
    _, inside, outside = _membership(y)
    return Tensor2(inside) @ emb, Tensor2(outside) @ emb


def centroid_loss(emb: Tensor2, labels: Sequence[int], mode: str = "separation",
                  separation_margin: float = 1.0) -> Tensor2:
    """
    質心損失，按身份求和

    as_written: ||C_I - C_II||^2
    separation: [separation_margin - ||C_I - C_II||]+
    """
    c_inside, c_outside = centroid_terms(emb, labels)
    squared = nx.squared_norm_rows(c_inside - c_outside)
    if mode == "as_written":
        return nx.total(squared)
    if mode == "separation":
        return nx.total(nx.relu(nx.sub(separation_margin, nx.sqrt(squared))))
    raise LossError(f"未知的質心損失模式: {mode}")


def classification_loss(logits: Tensor2, labels: Sequence[int]) -> Tensor2:
    """交叉熵: 真實類別 log softmax 的負均值"""
    n = logits.rows
    y = _labels_array(labels, n)
    if n == 0:
        raise LossError("classification_loss: 空批次")
    out_of_range = (y < 0) | (y >= logits.cols)
    if out_of_range.any():
        bad = int(y[np.flatnonzero(out_of_range)[0]])
        raise LossError(f"classification_loss: 類別 {bad} 超出範圍 [0, {logits.cols})")
    picked = nx.pick(nx.log_softmax_rows(logits), np.arange(n), y)
    return nx.scale(nx.total(picked), -1.0 / n)


def combined_loss(emb: Tensor2, logits: Tensor2, labels: Sequence[int], weights: LossWeights,
                  metric: str = "euclidean",
                  class_labels: Optional[Sequence[int]] = None) -> Tuple[Tensor2, Dict[str, float]]:
    """
    組合損失 alpha*L_T + beta*L_C + gamma*L_Centroid + delta*L_TC

    Args:
        emb: 批次嵌入
        logits: 分類層輸出
        labels: 身份標籤 (挖掘與質心用)
        weights: 損失權重與邊界
        metric: 距離度量
        class_labels: 分類層的類別下標，默認與 labels 相同

    Returns:
        (加權總損失, 各項未加權值)
    """
    if class_labels is None:
        class_labels = labels
    terms = {
        'triplet': (weights.alpha, lambda: triplet_loss(emb, labels, weights.margin, metric)),
        'classification': (weights.beta, lambda: classification_loss(logits, class_labels)),
        'centroid': (weights.gamma, lambda: centroid_loss(
            emb, labels, weights.centroid_mode, weights.separation_margin)),
        'triplet_centroid': (weights.delta, lambda: triplet_centroid_loss(
            emb, labels, weights.margin_tc, metric)),
    }

    loss = None
    breakdown: Dict[str, float] = {}
    for name, (weight, build) in terms.items():
        value = build()
        breakdown[name] = value.item()
        if weight == 0:
            continue
        weighted = nx.scale(value, float(weight))
        loss = weighted if loss is None else loss + weighted

    if loss is None:
        loss = Tensor2(0.0)
    breakdown['total'] = loss.item()
    logger.debug(f"組合損失: {breakdown}")
    return loss, breakdown
