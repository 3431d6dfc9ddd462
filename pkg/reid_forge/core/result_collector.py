"""
結果收集器 - ResultCollector
負責把訓練日誌、消融表與檢索排名寫成 TSV 報告
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import pandas as pd

from ..common.errors import DatasetError
from ..common.models import RankingResult

PathLike = Union[str, Path]

METRICS_LOG = "metrics.tsv"
ABLATION_TABLE = "ablation.tsv"


def format_kv(record: Mapping[str, Any]) -> List[str]:
    """
    把記錄轉換為 key=value 行

    mAP / R1 與 *_mAP / *_R1 保留一位小數，其他浮點數用 repr 精度
    """
    lines = []
    for key, value in record.items():
        if isinstance(value, float):
            if key in ('mAP', 'R1') or key.endswith('_mAP') or key.endswith('_R1'):
                text = "nan" if math.isnan(value) else f"{value:.1f}"
            else:
                text = repr(value)
        elif value is None:
            text = ""
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    return lines


class ResultCollector:
    """結果收集器"""

    def __init__(self, output_dir: Optional[PathLike] = None):
        """
        初始化結果收集器

        Args:
            output_dir: 報告輸出目錄，相對文件名都放在這裡
        """
        self.output_dir = Path(output_dir) if output_dir else Path(".")
        self.logger = logging.getLogger(__name__)

    def _resolve(self, file_path: Optional[PathLike], default_name: str) -> Path:
        path = Path(file_path) if file_path else self.output_dir / default_name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetError(f"無法創建輸出目錄 {path.parent}: {e}") from e
        return path

    def _write(self, frame: pd.DataFrame, path: Path, what: str) -> Path:
        try:
            frame.to_csv(path, sep='\t', index=False, float_format='%.17g')
        except OSError as e:
            self.logger.error(f"寫入{what}失敗: {e}")
            raise DatasetError(f"無法寫入 {path}: {e}") from e
        self.logger.info(f"{what}已寫入: {path} ({len(frame)} 行)")
        return path

    def write_metrics_log(self, report, file_path: Optional[PathLike] = None) -> Path:
        """
        寫入訓練指標日誌 (每個 epoch 一行)

        Args:
            report: RunReport
            file_path: 目標文件，默認 <output_dir>/metrics.tsv
        """
        return self._write(report.to_frame(), self._resolve(file_path, METRICS_LOG), "訓練指標日誌")

    def write_ablation_table(self, table: pd.DataFrame, file_path: Optional[PathLike] = None) -> Path:
        """寫入消融表"""
        return self._write(table, self._resolve(file_path, ABLATION_TABLE), "消融表")

    @staticmethod
    def rankings_frame(rankings: Iterable[RankingResult], top_k: Optional[int] = None) -> pd.DataFrame:
        """每個查詢的前 top_k 名 gallery (rank 從 1 開始)"""
        rows: List[Dict[str, Any]] = []
        for result in rankings:
            limit = len(result.gallery_ids) if top_k is None else min(top_k, len(result.gallery_ids))
            for rank in range(limit):
                rows.append({
                    'query_id': result.query_id,
                    'rank': rank + 1,
                    'gallery_id': result.gallery_ids[rank],
                    'distance': result.distances[rank],
                    'relevant': int(result.relevance[rank]),
                })
        return pd.DataFrame(rows, columns=['query_id', 'rank', 'gallery_id', 'distance', 'relevant'])

    def write_rankings(self, rankings: Iterable[RankingResult], file_path: PathLike,
                       top_k: Optional[int] = 10) -> Path:
        """寫入逐查詢排名表"""
        frame = self.rankings_frame(rankings, top_k)
        return self._write(frame, self._resolve(file_path, "rankings.tsv"), "檢索排名")

    def render_table(self, table: pd.DataFrame) -> str:
        """把表格渲染為 TSV 文本 (用於標準輸出)"""
        return table.to_csv(sep='\t', index=False, float_format='%.1f', na_rep='nan')
