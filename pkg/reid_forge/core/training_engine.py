"""
訓練引擎 - TrainingEngine
採樣器 -> 網絡前向 -> 組合損失 -> 動量梯度下降

學習率按 epoch 線性衰減: lr_e = base * (1 - (1 - floor) * e / epochs)，e 從 0 開始。
每 eval_period 個 epoch (以及最後一個 epoch) 在評估劃分上計算 mAP/R1，
保留 best.ckpt (最高 mAP)、last.ckpt 與每 checkpoint_period 個 epoch 的 epoch_<e>.ckpt。
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..common.errors import DatasetError, NumericError
from ..common.models import Batch, Dataset
from ..config.config_manager import LossWeights, TrainConfig
from .batch_sampler import make_sampler
from .dataset_io import load_dataset
from .embedding_model import EmbeddingNet, embed_dataset, init, save_checkpoint
from .evaluator import EvaluationResult, evaluate_split
from .loss_library import combined_loss
from .numerics import Tensor2


class MomentumOptimizer:
    """經典動量: v <- momentum * v - lr * g; p <- p + v"""

    def __init__(self, params: Dict[str, Tensor2], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.values) for name, p in params.items()}

    def step(self, lr: float):
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"參數 {name} 的梯度非有限")
            grads[name] = g
        for name, p in self.params.items():
            v = self.momentum * self.velocity[name] - lr * grads[name]
            self.velocity[name] = v
            p.values = p.values + v


def step(net: EmbeddingNet, features: np.ndarray, labels: Sequence[int], class_labels: Sequence[int],
         weights: LossWeights, lr: float, optimizer: MomentumOptimizer,
         metric: str = "euclidean") -> Dict[str, float]:
    """
    單步訓練: 前向 (train 模式)、組合損失、反向、動量更新

    Returns:
        損失分項 (未加權) 與 total
    """
    net.zero_grad()
    emb, logits = net.forward(Tensor2(features), mode="train")
    loss, breakdown = combined_loss(emb, logits, labels, weights, metric, class_labels=class_labels)
    if not math.isfinite(breakdown['total']):
        raise NumericError(f"損失非有限: {breakdown}")
    loss.backward()
    optimizer.step(lr)
    return breakdown


@dataclass
class EpochRecord:
    """一個 epoch 的訓練記錄"""
    epoch: int
    lr: float
    loss: float
    n_batches: int
    terms: Dict[str, float] = field(default_factory=dict)
    mAP: Optional[float] = None
    R1: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        record = {'epoch': self.epoch, 'lr': self.lr, 'loss': self.loss, 'n_batches': self.n_batches}
        record.update({f"loss_{name}": value for name, value in self.terms.items()})
        record['mAP'] = self.mAP if self.mAP is not None else float('nan')
        record['R1'] = self.R1 if self.R1 is not None else float('nan')
        return record


@dataclass
class RunReport:
    """一次訓練的結果"""
    output_dir: str
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_mAP: float = float('nan')
    best_R1: float = float('nan')
    best_checkpoint: Optional[str] = None
    last_checkpoint: Optional[str] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([record.to_dict() for record in self.epochs])

    def summary(self) -> Dict[str, Any]:
        return {
            'epochs': len(self.epochs),
            'final_loss': self.epochs[-1].loss if self.epochs else float('nan'),
            'best_epoch': self.best_epoch,
            'best_mAP': self.best_mAP,
            'best_R1': self.best_R1,
            'best_checkpoint': self.best_checkpoint,
        }


class TrainingEngine:
    """訓練引擎"""

    def __init__(self, config: TrainConfig, dataset: Dataset, output_dir: Optional[str] = None):
        """
        初始化訓練引擎

        Args:
            config: 訓練配置
            dataset: 已載入的數據集
            output_dir: 檢查點輸出目錄，默認 config.output_dir
        """
        self.config = config
        self.dataset = dataset
        self.output_dir = Path(output_dir or config.output_dir)
        self.logger = logging.getLogger(__name__)

        train_positions = dataset.positions(role='train')
        if len(train_positions) == 0:
            raise DatasetError("訓練劃分為空")
        self.class_ids = sorted(int(pid) for pid in np.unique(dataset.player_ids[train_positions]))
        self.class_index = {pid: i for i, pid in enumerate(self.class_ids)}

        model_config = replace(config.model, input_dim=dataset.feature_dim,
                               n_classes=max(2, len(self.class_ids)))
        self.net = init(model_config)
        self.optimizer = MomentumOptimizer(self.net.params, config.momentum)
        self.sampler = make_sampler(config.sampler, dataset, config.batch, config.seed)
        self.history: List[Dict[str, Any]] = []

    def _batch_arrays(self, batch: Batch):
        position_of = self.dataset.position_of
        positions = [position_of[s] for s in batch.sample_ids]
        labels = batch.labels
        return self.dataset.feature_rows(positions), labels, [self.class_index[l] for l in labels]

    def train_epoch(self, epoch: int) -> EpochRecord:
        """訓練一個 epoch (epoch 從 0 開始)"""
        lr = self.config.learning_rate(epoch)
        losses: List[float] = []
        term_sums: Dict[str, List[float]] = {}

        for batch_idx, batch in enumerate(self.sampler.iter_epoch(epoch)):
            features, labels, class_labels = self._batch_arrays(batch)
            try:
                breakdown = step(self.net, features, labels, class_labels, self.config.weights, lr,
                                 self.optimizer, self.config.metric)
            except NumericError as e:
                raise NumericError(f"epoch {epoch + 1} batch {batch_idx + 1}: {e}") from e
            losses.append(breakdown['total'])
            for name, value in breakdown.items():
                if name != 'total':
                    term_sums.setdefault(name, []).append(value)
            self.logger.debug(f"epoch {epoch + 1} batch {batch_idx + 1}: loss={breakdown['total']:.6f}")

        mean_loss = math.fsum(losses) / len(losses) if losses else float('nan')
        terms = {name: math.fsum(values) / len(values) for name, values in term_sums.items()}
        return EpochRecord(epoch=epoch + 1, lr=lr, loss=mean_loss, n_batches=len(losses), terms=terms)

    def evaluate(self) -> EvaluationResult:
        embeddings = embed_dataset(self.net, self.dataset)
        return evaluate_split(self.dataset, embeddings, self.config.metric, split=self.config.eval_split)

    def _save(self, name: str, epoch: int, metrics: Dict[str, Any]) -> str:
        path = save_checkpoint(self.net, self.output_dir / name, epoch=epoch, metrics=metrics,
                               history=self.history, class_ids=self.class_ids)
        return str(path)

    def run(self) -> RunReport:
        """執行完整訓練"""
        cfg = self.config
        report = RunReport(output_dir=str(self.output_dir))
        self.logger.info(f"開始訓練: sampler={cfg.sampler}, K={cfg.batch.k}, M={cfg.batch.m}, "
                         f"epochs={cfg.epochs}, lr={cfg.lr}, 類別數={len(self.class_ids)}")

        for epoch in range(cfg.epochs):
            record = self.train_epoch(epoch)
            number = epoch + 1

            if number % cfg.eval_period == 0 or number == cfg.epochs:
                result = self.evaluate()
                record.mAP, record.R1 = result.mAP, result.R1

            report.epochs.append(record)
            self.history.append(record.to_dict())
            metrics = {'loss': record.loss, 'mAP': record.mAP, 'R1': record.R1}
            self.logger.info(
                f"epoch {number}/{cfg.epochs}: lr={record.lr:.6f} loss={record.loss:.6f} "
                f"batches={record.n_batches}"
                + (f" mAP={record.mAP:.1f} R1={record.R1:.1f}" if record.mAP is not None else ""))

            if record.mAP is not None and not math.isnan(record.mAP) \
                    and (math.isnan(report.best_mAP) or record.mAP > report.best_mAP):
                report.best_epoch, report.best_mAP, report.best_R1 = number, record.mAP, record.R1
                report.best_checkpoint = self._save("best.ckpt", number, metrics)
            if number % cfg.checkpoint_period == 0:
                self._save(f"epoch_{number}.ckpt", number, metrics)

        last = report.epochs[-1]
        report.last_checkpoint = self._save(
            "last.ckpt", last.epoch, {'loss': last.loss, 'mAP': last.mAP, 'R1': last.R1})
        if report.best_checkpoint is None:
            self.logger.warning("評估劃分沒有有效查詢，best.ckpt 使用最後一個 epoch")
            report.best_epoch = last.epoch
            report.best_checkpoint = self._save("best.ckpt", last.epoch, {'loss': last.loss})

        self.logger.info(f"訓練完成: best epoch={report.best_epoch} mAP={report.best_mAP:.1f} "
                         f"R1={report.best_R1:.1f} -> {report.best_checkpoint}")
        return report


def train(config: TrainConfig, dataset: Optional[Dataset] = None,
          output_dir: Optional[str] = None) -> RunReport:
    """按配置訓練；dataset 為空時從 config.dataset 載入"""
    if dataset is None:
        if not config.dataset:
            raise DatasetError("沒有指定數據集路徑")
        dataset = load_dataset(config.dataset)
    return TrainingEngine(config, dataset, output_dir).run()
