"""
異常定義
每個異常帶有命令行退出碼: 1 用法錯誤, 2 數據錯誤, 3 數值失敗
"""


class ReidForgeError(Exception):
    """所有 reid-forge 異常的基類"""
    exit_code = 1


class UsageError(ReidForgeError):
    """命令行參數或配置值錯誤"""
    exit_code = 1


class ConfigError(UsageError):
    """配置文件錯誤 (未知鍵、非法值、路徑不存在)"""


class DatasetError(ReidForgeError):
    """數據集讀寫或校驗失敗"""
    exit_code = 2


class NumericError(ReidForgeError):
    """非有限損失或梯度"""
    exit_code = 3


class ShapeError(ReidForgeError, ValueError):
    """矩陣形狀不匹配"""

    def __init__(self, op: str, left, right=None):
        if right is None:
            message = f"{op}: 形狀不合法 {tuple(left)}"
        else:
            message = f"{op}: 形狀不匹配 {tuple(left)} vs {tuple(right)}"
        super().__init__(message)
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right) if right is not None else None


class SamplingError(ReidForgeError, ValueError):
    """採樣前置條件不滿足 (批次形狀、層級名稱等)"""


class InsufficientIdentitiesError(SamplingError, DatasetError):
    """訓練劃分的身份數少於每批需要的 M，按數據錯誤退出"""


class LossError(ReidForgeError, ValueError):
    """損失函數前置條件不滿足"""


class EvaluationError(ReidForgeError, ValueError):
    """評估前置條件不滿足 (沒有相關樣本、缺少嵌入等)"""
