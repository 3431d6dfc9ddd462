"""
數據集讀寫 - 交換格式
Dataset interchange I/O

目錄結構:
    matches.tsv   match_id, year, team_a, team_b
    actions.tsv   action_id, match_id
    samples.tsv   sample_id, player_id, action_id, role, feature_index, split
    features.bin  "RF1 <rows> <dim>\\n" + rows*dim 個小端 float32
"""

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..common.errors import DatasetError
from ..common.models import ActionRef, Dataset, MatchMeta, Sample

logger = logging.getLogger(__name__)

BLOB_MAGIC = "RF1"

MATCH_COLUMNS = ['match_id', 'year', 'team_a', 'team_b']
ACTION_COLUMNS = ['action_id', 'match_id']
SAMPLE_COLUMNS = ['sample_id', 'player_id', 'action_id', 'role', 'feature_index', 'split']

PathLike = Union[str, Path]


# ----------------------------------------------------------------------
# 特徵二進制文件

def write_feature_blob(path: PathLike, values: np.ndarray):
    """寫入 RF1 格式的 float32 特徵文件"""
    array = np.ascontiguousarray(values, dtype='<f4')
    if array.ndim != 2:
        raise DatasetError(f"特徵矩陣必須是二維: {array.shape}")
    rows, dim = array.shape
    with open(path, 'wb') as f:
        f.write(f"{BLOB_MAGIC} {rows} {dim}\n".encode('ascii'))
        f.write(array.tobytes())


def read_feature_blob(path: PathLike) -> np.ndarray:
    """讀取 RF1 格式的特徵文件，返回 float32 矩陣"""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"缺少文件: {path}")
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise DatasetError(f"{path.name}: 缺少文件頭")
    header = raw[:newline].decode('ascii', errors='replace').split()
    if len(header) != 3 or header[0] != BLOB_MAGIC:
        raise DatasetError(f"{path.name}: 文件頭格式錯誤 {' '.join(header)!r}")
    try:
        rows, dim = int(header[1]), int(header[2])
    except ValueError:
        raise DatasetError(f"{path.name}: 文件頭的行數或維度不是整數") from None
    if rows < 0 or dim < 0:
        raise DatasetError(f"{path.name}: 文件頭的行數或維度為負")

    payload = raw[newline + 1:]
    expected = rows * dim * 4
    if len(payload) != expected:
        raise DatasetError(
            f"{path.name}: 特徵維度不匹配，文件頭聲明 {rows}x{dim} ({expected} 字節)，"
            f"實際 {len(payload)} 字節")
    return np.frombuffer(payload, dtype='<f4').reshape(rows, dim).astype(np.float32)


# ----------------------------------------------------------------------
# TSV 元數據

def _read_table(path: Path, columns: List[str]) -> pd.DataFrame:
    if not path.is_file():
        raise DatasetError(f"缺少文件: {path}")
    try:
        frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)
    except pd.errors.ParserError as e:
        raise DatasetError(f"{path.name}: 記錄格式錯誤 ({e})") from e
    if list(frame.columns) != columns:
        raise DatasetError(
            f"{path.name} 第1行: 表頭應為 {'/'.join(columns)}，實際 {'/'.join(frame.columns)}")
    return frame


def _to_int(path: Path, row: int, column: str, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        # 表頭佔第1行
        raise DatasetError(f"{path.name} 第{row + 2}行: {column} 不是整數 ({text!r})") from None


def _check_fields(path: Path, row: int, record: Dict[str, str]):
    empty = [name for name, value in record.items() if not isinstance(value, str) or value == ""]
    if empty:
        raise DatasetError(f"{path.name} 第{row + 2}行: 字段為空 ({', '.join(empty)})")


def load_dataset(path: PathLike) -> Dataset:
    """
    從目錄讀取並校驗數據集

    Args:
        path: 數據集目錄

    Returns:
        已通過校驗的 Dataset
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"數據集目錄不存在: {root}")

    matches: Dict[str, MatchMeta] = {}
    match_path = root / "matches.tsv"
    for row, record in enumerate(_read_table(match_path, MATCH_COLUMNS).to_dict('records')):
        _check_fields(match_path, row, record)
        if record['match_id'] in matches:
            raise DatasetError(f"{match_path.name} 第{row + 2}行: 重複的 match_id {record['match_id']}")
        matches[record['match_id']] = MatchMeta(
            match_id=record['match_id'],
            year=_to_int(match_path, row, 'year', record['year']),
            team_a=record['team_a'],
            team_b=record['team_b'],
        )

    actions: Dict[str, ActionRef] = {}
    action_path = root / "actions.tsv"
    for row, record in enumerate(_read_table(action_path, ACTION_COLUMNS).to_dict('records')):
        _check_fields(action_path, row, record)
        if record['action_id'] in actions:
            raise DatasetError(f"{action_path.name} 第{row + 2}行: 重複的 action_id {record['action_id']}")
        actions[record['action_id']] = ActionRef(record['action_id'], record['match_id'])

    samples: List[Sample] = []
    sample_path = root / "samples.tsv"
    for row, record in enumerate(_read_table(sample_path, SAMPLE_COLUMNS).to_dict('records')):
        _check_fields(sample_path, row, record)
        samples.append(Sample(
            sample_id=record['sample_id'],
            player_id=_to_int(sample_path, row, 'player_id', record['player_id']),
            action_id=record['action_id'],
            role=record['role'],
            feature_index=_to_int(sample_path, row, 'feature_index', record['feature_index']),
            split=record['split'],
        ))

    features = read_feature_blob(root / "features.bin")
    dataset = Dataset(samples=tuple(samples), actions=actions, matches=matches, features=features)
    dataset.validate()
    logger.info(f"載入數據集 {root}: {len(samples)} 個樣本, {len(actions)} 個動作, "
                f"{len(matches)} 場比賽, 特徵維度 {features.shape[1]}")
    return dataset


def save_dataset(dataset: Dataset, path: PathLike) -> Path:
    """把數據集寫為交換格式目錄"""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        pd.DataFrame([m.to_dict() for m in dataset.matches.values()], columns=MATCH_COLUMNS) \
            .to_csv(root / "matches.tsv", sep='\t', index=False)
        pd.DataFrame([a.to_dict() for a in dataset.actions.values()], columns=ACTION_COLUMNS) \
            .to_csv(root / "actions.tsv", sep='\t', index=False)
        pd.DataFrame([s.to_dict() for s in dataset.samples], columns=SAMPLE_COLUMNS) \
            .to_csv(root / "samples.tsv", sep='\t', index=False)
        write_feature_blob(root / "features.bin", dataset.features)
    except OSError as e:
        raise DatasetError(f"無法寫入數據集目錄 {root}: {e}") from e
    logger.info(f"數據集已保存到: {root} ({len(dataset)} 個樣本)")
    return root


def index_by_action(dataset: Dataset) -> Dict[str, Tuple[List[Sample], List[Sample]]]:
    """
    按動作劃分 query / gallery 樣本

    Returns:
        action_id -> (query 樣本列表, gallery 樣本列表)，不含訓練樣本
    """
    index: Dict[str, Tuple[List[Sample], List[Sample]]] = {}
    for sample in dataset.samples:
        if sample.role == 'train':
            continue
        queries, gallery = index.setdefault(sample.action_id, ([], []))
        (queries if sample.role == 'query' else gallery).append(sample)
    return index


# ----------------------------------------------------------------------
# 外部嵌入

def save_embeddings(path: PathLike, dataset: Dataset, embeddings: np.ndarray,
                    sample_ids: Sequence[str] = None) -> Path:
    """
    保存嵌入

    .bin 後綴寫 RF1 文件 (每個數據集樣本一行，float32)，
    其他後綴寫 TSV (sample_id 列 + 數值列，17位有效數字)。
    """
    path = Path(path)
    values = np.asarray(embeddings, dtype=np.float64)
    ids = list(sample_ids) if sample_ids is not None else [s.sample_id for s in dataset.samples]
    if values.ndim != 2 or values.shape[0] != len(ids):
        raise DatasetError(f"嵌入形狀 {values.shape} 與樣本數 {len(ids)} 不一致")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".bin":
            if sample_ids is not None and len(ids) != len(dataset):
                raise DatasetError("RF1 嵌入文件必須覆蓋全部數據集樣本")
            write_feature_blob(path, values)
        else:
            frame = pd.DataFrame(values, columns=[f"e{i}" for i in range(values.shape[1])])
            frame.insert(0, 'sample_id', ids)
            frame.to_csv(path, sep='\t', index=False, float_format='%.17g')
    except OSError as e:
        raise DatasetError(f"無法寫入嵌入文件 {path}: {e}") from e
    logger.info(f"嵌入已保存到: {path} ({len(ids)} 行)")
    return path


def load_embeddings(path: PathLike, dataset: Dataset) -> Dict[str, np.ndarray]:
    """
    讀取外部計算的嵌入

    Returns:
        sample_id -> float64 嵌入向量
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"嵌入文件不存在: {path}")

    with open(path, 'rb') as f:
        magic = f.read(len(BLOB_MAGIC) + 1)
    if magic == f"{BLOB_MAGIC} ".encode('ascii'):
        values = read_feature_blob(path).astype(np.float64)
        if values.shape[0] != len(dataset):
            raise DatasetError(f"{path.name}: 行數 {values.shape[0]} 與數據集樣本數 {len(dataset)} 不一致")
        return {s.sample_id: values[i] for i, s in enumerate(dataset.samples)}

    try:
        frame = pd.read_csv(path, sep='\t', dtype={'sample_id': str}, float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"{path.name}: 嵌入文件格式錯誤 ({e})") from e
    if frame.columns.empty or frame.columns[0] != 'sample_id' or frame.shape[1] < 2:
        raise DatasetError(f"{path.name}: 第一列必須是 sample_id，且至少有一列數值")
    try:
        values = frame.iloc[:, 1:].to_numpy(dtype=np.float64)
    except ValueError as e:
        raise DatasetError(f"{path.name}: 嵌入數值無法解析 ({e})") from e

    known = dataset.position_of
    result: Dict[str, np.ndarray] = {}
    for row, sample_id in enumerate(frame['sample_id']):
        if sample_id not in known:
            raise DatasetError(f"{path.name} 第{row + 2}行: 未知的 sample_id {sample_id}")
        result[sample_id] = values[row]
    logger.info(f"載入嵌入 {path}: {len(result)} 行, 維度 {values.shape[1]}")
    return result
