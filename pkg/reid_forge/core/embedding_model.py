"""
嵌入網絡 - EmbeddingNet
原始特徵 -> 隱藏層 (affine + ReLU) -> 嵌入層 (affine + 可選 BatchNorm) -> 分類層

嵌入層輸出 (分類層之前) 即檢索用的特徵向量。

檢查點格式:
    第1行  "RFCK1"
    第2行  JSON 頭: config / epoch / metrics / blocks [[名稱, 行, 列], ...]
    其後   按 blocks 順序排列的小端 float64 數據
    旁車文件 <checkpoint>.history.tsv 記錄每個 epoch 的損失與指標
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..common.errors import ConfigError, DatasetError, ShapeError
from ..common.models import Dataset
from ..config.config_manager import ModelConfig
from . import numerics as nx
from .numerics import Tensor2

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RFCK1"
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class EmbeddingNet:
    """
    前饋嵌入網絡

    Args:
        config: 網絡形狀
        params: 參數名 -> Tensor2 (requires_grad=True)
        buffers: BatchNorm 運行統計量 (running_mean / running_var，1 x embedding_dim)
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor2], buffers: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.last_batch_mean: Optional[np.ndarray] = None
        self.last_batch_var: Optional[np.ndarray] = None

    @property
    def n_hidden(self) -> int:
        return len(self.config.hidden_dims)

    def parameters(self) -> Dict[str, Tensor2]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> Dict[str, np.ndarray]:
        """參數與緩衝區的數值副本 (用於比較與保存)"""
        state = {name: p.values.copy() for name, p in self.params.items()}
        state.update({f"bn.{name}": value.copy() for name, value in self.buffers.items()})
        return state

    # ------------------------------------------------------------------

    def _affine(self, x: Tensor2, prefix: str) -> Tensor2:
        return nx.add(x @ self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def _batchnorm(self, h: Tensor2, mode: str) -> Tensor2:
        gamma, beta = self.params["bn.gamma"], self.params["bn.beta"]
        if mode == "train":
            mean = nx.mean_rows(h)
            centered = h - mean
            var = nx.mean_rows(nx.mul(centered, centered))
            normalized = nx.mul(centered, nx.power(nx.add(var, BN_EPS), -0.5))
            self._update_running(mean.values, var.values, h.rows)
        else:
            mean = Tensor2(self.buffers["running_mean"])
            inv_std = Tensor2(1.0 / np.sqrt(self.buffers["running_var"] + BN_EPS))
            normalized = nx.mul(h - mean, inv_std)
        return nx.add(nx.mul(normalized, gamma), beta)

    def _update_running(self, mean: np.ndarray, var: np.ndarray, n: int):
        self.last_batch_mean = mean.copy()
        self.last_batch_var = var.copy()
        unbiased = var * n / (n - 1) if n > 1 else var
        self.buffers["running_mean"] = (1.0 - BN_MOMENTUM) * self.buffers["running_mean"] + BN_MOMENTUM * mean
        self.buffers["running_var"] = (1.0 - BN_MOMENTUM) * self.buffers["running_var"] + BN_MOMENTUM * unbiased

    def forward(self, x: Union[Tensor2, np.ndarray], mode: str = "eval") -> Tuple[Tensor2, Tensor2]:
        """
        前向傳播

        Args:
            x: n x input_dim 原始特徵
            mode: train 使用批次統計並更新運行統計量；eval 使用運行統計量

        Returns:
            (嵌入 n x embedding_dim, logits n x n_classes)
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"未知的模式: {mode}")
        x = nx.as_tensor(x)
        if x.cols != self.config.input_dim:
            raise ShapeError('EmbeddingNet.forward', x.shape, (x.rows, self.config.input_dim))

        h = x
        for i in range(self.n_hidden):
            h = nx.relu(self._affine(h, f"layer{i}"))
        emb = self._affine(h, "embed")
        if self.config.batchnorm:
            emb = self._batchnorm(emb, mode)
        logits = self._affine(emb, "classifier")
        return emb, logits

    def embed(self, features: np.ndarray) -> np.ndarray:
        """評估模式下的嵌入 (不記錄梯度)"""
        emb, _ = self.forward(Tensor2(features), mode="eval")
        return emb.values


def _weight(rng: np.random.Generator, fan_in: int, fan_out: int, scheme: str) -> np.ndarray:
    if scheme == "identity":
        return np.eye(fan_in, fan_out)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init(config: ModelConfig) -> EmbeddingNet:
    """
    按配置初始化網絡

    權重為 fan-in 縮放的均勻分佈 U(-sqrt(6/fan_in), sqrt(6/fan_in))，
    init_scheme=identity 時隱藏層與嵌入層使用 (補零/截斷的) 單位矩陣；偏置全零
    """
    errors = config.validate()
    if errors:
        raise ConfigError("; ".join(errors))

    rng = np.random.default_rng(config.init_seed)
    dims = [config.input_dim, *config.hidden_dims, config.embedding_dim]
    names = [f"layer{i}" for i in range(len(config.hidden_dims))] + ["embed"]

    params: Dict[str, Tensor2] = {}
    for name, fan_in, fan_out in zip(names, dims[:-1], dims[1:]):
        params[f"{name}.weight"] = Tensor2(_weight(rng, fan_in, fan_out, config.init_scheme), requires_grad=True)
        params[f"{name}.bias"] = Tensor2(np.zeros((1, fan_out)), requires_grad=True)

    buffers: Dict[str, np.ndarray] = {}
    if config.batchnorm:
        params["bn.gamma"] = Tensor2(np.ones((1, config.embedding_dim)), requires_grad=True)
        params["bn.beta"] = Tensor2(np.zeros((1, config.embedding_dim)), requires_grad=True)
        buffers["running_mean"] = np.zeros((1, config.embedding_dim))
        buffers["running_var"] = np.ones((1, config.embedding_dim))

    params["classifier.weight"] = Tensor2(
        _weight(rng, config.embedding_dim, config.n_classes, "uniform"), requires_grad=True)
    params["classifier.bias"] = Tensor2(np.zeros((1, config.n_classes)), requires_grad=True)

    logger.debug(f"初始化網絡: dims={dims}, n_classes={config.n_classes}, seed={config.init_seed}")
    return EmbeddingNet(config, params, buffers)


def forward(net: EmbeddingNet, x: Union[Tensor2, np.ndarray], mode: str = "eval") -> Tuple[Tensor2, Tensor2]:
    return net.forward(x, mode)


def embed_dataset(net: EmbeddingNet, dataset: Dataset) -> np.ndarray:
    """數據集全部樣本的評估模式嵌入，與 dataset.samples 對齊"""
    if len(dataset) == 0:
        return np.zeros((0, net.config.embedding_dim))
    return net.embed(dataset.feature_rows(np.arange(len(dataset))))


# ----------------------------------------------------------------------
# 檢查點

@dataclass
class CheckpointInfo:
    """檢查點頭部信息"""
    config: ModelConfig
    epoch: int = 0
    metrics: Dict[str, Any] = field(default_factory=dict)
    class_ids: List[int] = field(default_factory=list)


def _config_to_dict(config: ModelConfig) -> Dict[str, Any]:
    data = asdict(config)
    data['hidden_dims'] = list(config.hidden_dims)
    return data


def history_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".history.tsv")


def save_checkpoint(net: EmbeddingNet, path: Union[str, Path], epoch: int = 0,
                    metrics: Optional[Dict[str, Any]] = None,
                    history: Optional[List[Dict[str, Any]]] = None,
                    class_ids: Optional[List[int]] = None) -> Path:
    """
    保存檢查點與歷史旁車文件

    Args:
        net: 網絡
        path: 檢查點路徑
        epoch: 當前 epoch
        metrics: 當前指標
        history: 每個 epoch 的記錄
        class_ids: 分類層類別對應的 player_id
    """
    path = Path(path)
    state = net.state()
    header = {
        'config': _config_to_dict(net.config),
        'epoch': int(epoch),
        'metrics': metrics or {},
        'class_ids': [int(c) for c in (class_ids or [])],
        'blocks': [[name, int(v.shape[0]), int(v.shape[1])] for name, v in state.items()],
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(CHECKPOINT_MAGIC + b"\n")
            f.write(json.dumps(header, ensure_ascii=False).encode('utf-8') + b"\n")
            for value in state.values():
                f.write(np.ascontiguousarray(value, dtype='<f8').tobytes())
        pd.DataFrame(history or []).to_csv(history_path(path), sep='\t', index=False, float_format='%.17g')
    except OSError as e:
        raise DatasetError(f"無法寫入檢查點 {path}: {e}") from e
    logger.info(f"檢查點已保存: {path} (epoch {epoch})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[EmbeddingNet, CheckpointInfo]:
    """讀取檢查點，返回網絡與頭部信息"""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"檢查點不存在: {path}")
    raw = path.read_bytes()
    first = raw.find(b"\n")
    second = raw.find(b"\n", first + 1)
    if first < 0 or second < 0 or raw[:first] != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path.name}: 不是有效的檢查點文件")
    try:
        header = json.loads(raw[first + 1:second].decode('utf-8'))
        config_data = dict(header['config'])
        config_data['hidden_dims'] = tuple(config_data['hidden_dims'])
        config = ModelConfig(**config_data)
        blocks = header['blocks']
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"{path.name}: 檢查點頭部無法解析 ({e})") from e

    payload = raw[second + 1:]
    expected = sum(rows * cols for _, rows, cols in blocks) * 8
    if len(payload) != expected:
        raise DatasetError(f"{path.name}: 參數數據長度 {len(payload)} 與頭部聲明 {expected} 不一致")

    reference = init(config)
    offset = 0
    for name, rows, cols in blocks:
        size = rows * cols * 8
        values = np.frombuffer(payload[offset:offset + size], dtype='<f8').reshape(rows, cols).astype(np.float64)
        offset += size
        if name.startswith("bn.running_"):
            target_shape = reference.buffers.get(name[3:], np.empty(0)).shape
            if target_shape != values.shape:
                raise DatasetError(f"{path.name}: 緩衝區 {name} 形狀不匹配")
            reference.buffers[name[3:]] = values
        else:
            if name not in reference.params or reference.params[name].shape != values.shape:
                raise DatasetError(f"{path.name}: 參數塊 {name} 與配置不匹配")
            reference.params[name] = Tensor2(values, requires_grad=True)

    info = CheckpointInfo(
        config=config,
        epoch=int(header.get('epoch', 0)),
        metrics=dict(header.get('metrics', {})),
        class_ids=[int(c) for c in header.get('class_ids', [])],
    )
    logger.info(f"載入檢查點: {path} (epoch {info.epoch})")
    return reference, info


def load_history(path: Union[str, Path]) -> pd.DataFrame:
    """讀取檢查點的歷史旁車文件"""
    sidecar = history_path(path)
    if not sidecar.is_file():
        raise DatasetError(f"缺少歷史文件: {sidecar}")
    try:
        return pd.read_csv(sidecar, sep='\t', float_precision='round_trip')
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
