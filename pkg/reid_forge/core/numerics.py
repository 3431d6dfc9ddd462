"""
數值計算庫 - 二維張量與反向模式自動微分

每個原語接收 Tensor2 並返回 Tensor2，同時記錄反向傳播閉包。
廣播只支持行向量 (1 x c) 與標量 (1 x 1)。
所有數值使用 float64。
"""

import logging
from typing import Callable, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

from ..common.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

SQRT_EPS = 1e-12

Operand = Union["Tensor2", float, int, np.ndarray]


class Tensor2:
    """
    二維張量

    Args:
        values: 數值 (會被轉成 float64 二維數組)
        requires_grad: 是否為需要梯度的葉子節點
    """

    __slots__ = ('values', 'requires_grad', 'grad', '_parents', '_backward', '_op')

    def __init__(self, values, requires_grad: bool = False,
                 _parents: Sequence["Tensor2"] = (), _op: str = ''):
        array = np.array(values, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(1, -1)
        elif array.ndim != 2:
            raise ShapeError('Tensor2', array.shape)
        self.values = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward: Callable[[np.ndarray], list] = lambda g: []
        self._op = _op

    def __repr__(self):
        return f"Tensor2(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeError('item', self.values.shape)
        return float(self.values[0, 0])

    def detach(self) -> "Tensor2":
        return Tensor2(self.values.copy())

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def backward(self, seed: Optional[np.ndarray] = None):
        """從本節點反向傳播，梯度累加到所有 requires_grad 的節點"""
        order: List[Tensor2] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

        if seed is None:
            seed = np.ones_like(self.values)
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent.requires_grad:
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg

    # 運算符
    def __add__(self, other: Operand): return add(self, other)
    def __radd__(self, other: Operand): return add(as_tensor(other), self)
    def __sub__(self, other: Operand): return sub(self, other)
    def __rsub__(self, other: Operand): return sub(as_tensor(other), self)
    def __mul__(self, other: Operand): return mul(self, other)
    def __rmul__(self, other: Operand): return mul(self, other)
    def __matmul__(self, other: "Tensor2"): return matmul(self, other)
    def __neg__(self): return scale(self, -1.0)


def as_tensor(x: Operand) -> Tensor2:
    return x if isinstance(x, Tensor2) else Tensor2(x)


def _node(values: np.ndarray, parents: Sequence[Tensor2], op: str, backward) -> Tensor2:
    out = Tensor2.__new__(Tensor2)
    out.values = values
    out.grad = None
    out._op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward
    return out


def _check_broadcast(op: str, a: Tensor2, b: Tensor2):
    if a.shape == b.shape:
        return
    if b.shape == (1, 1) or (b.rows == 1 and b.cols == a.cols):
        return
    raise ShapeError(op, a.shape, b.shape)


def _is_broadcast_side(a: Tensor2, b: Tensor2) -> bool:
    """a 是否為需要廣播的一側 (行向量或標量)"""
    if a.shape == b.shape:
        return False
    return a.shape == (1, 1) or (a.rows == 1 and b.rows != 1)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.array([[g.sum()]])
    return g.sum(axis=0, keepdims=True)


# ----------------------------------------------------------------------
# 原語

def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    if a.cols != b.rows:
        raise ShapeError('matmul', a.shape, b.shape)

    def backward(g):
        return [(a, g @ b.values.T), (b, a.values.T @ g)]
    return _node(a.values @ b.values, (a, b), 'matmul', backward)


def add(a: Operand, b: Operand) -> Tensor2:
    """逐元素加法，b 可以是行向量或標量"""
    a, b = as_tensor(a), as_tensor(b)
    if _is_broadcast_side(a, b):
        a, b = b, a
    _check_broadcast('add', a, b)

    def backward(g):
        return [(a, g), (b, _unbroadcast(g, b.shape))]
    return _node(a.values + b.values, (a, b), 'add', backward)


def sub(a: Operand, b: Operand) -> Tensor2:
    """逐元素減法 a - b，b 可以是行向量或標量；a 為標量時廣播到 b"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == (1, 1) and b.shape != (1, 1):
        return add(scale(b, -1.0), a)
    _check_broadcast('sub', a, b)

    def backward(g):
        return [(a, g), (b, -_unbroadcast(g, b.shape))]
    return _node(a.values - b.values, (a, b), 'sub', backward)


def mul(a: Operand, b: Operand) -> Tensor2:
    """逐元素乘法，b 可以是行向量或標量"""
    if not isinstance(b, Tensor2) and np.isscalar(b):
        return scale(as_tensor(a), float(b))
    a, b = as_tensor(a), as_tensor(b)
    if _is_broadcast_side(a, b):
        a, b = b, a
    _check_broadcast('mul', a, b)

    def backward(g):
        return [(a, g * b.values), (b, _unbroadcast(g * a.values, b.shape))]
    return _node(a.values * b.values, (a, b), 'mul', backward)


def scale(a: Tensor2, factor: float) -> Tensor2:
    def backward(g):
        return [(a, g * factor)]
    return _node(a.values * factor, (a,), 'scale', backward)


def relu(a: Tensor2) -> Tensor2:
    """ReLU，0 處次梯度取 0"""
    mask = a.values > 0

    def backward(g):
        return [(a, g * mask)]
    return _node(np.where(mask, a.values, 0.0), (a,), 'relu', backward)


def total(a: Tensor2) -> Tensor2:
    """所有元素求和 -> 1 x 1"""
    def backward(g):
        return [(a, np.full(a.shape, g[0, 0]))]
    return _node(np.array([[a.values.sum()]]), (a,), 'sum', backward)


def mean_rows(a: Tensor2) -> Tensor2:
    """按行平均 -> 1 x c"""
    n = a.rows

    def backward(g):
        return [(a, np.repeat(g / n, n, axis=0))]
    return _node(a.values.mean(axis=0, keepdims=True), (a,), 'mean_rows', backward)


def squared_norm_rows(a: Tensor2) -> Tensor2:
    """每行平方範數 -> n x 1"""
    def backward(g):
        return [(a, 2.0 * a.values * g)]
    return _node((a.values * a.values).sum(axis=1, keepdims=True), (a,), 'squared_norm_rows', backward)


def softmax_rows(a: Tensor2) -> Tensor2:
    s = _softmax(a.values, axis=1)

    def backward(g):
        return [(a, s * (g - (g * s).sum(axis=1, keepdims=True)))]
    return _node(s, (a,), 'softmax_rows', backward)


def log_softmax_rows(a: Tensor2) -> Tensor2:
    """數值穩定的 log(softmax)"""
    out = _log_softmax(a.values, axis=1)

    def backward(g):
        return [(a, g - np.exp(out) * g.sum(axis=1, keepdims=True))]
    return _node(out, (a,), 'log_softmax_rows', backward)


def log(a: Tensor2) -> Tensor2:
    def backward(g):
        return [(a, g / a.values)]
    with np.errstate(divide='ignore', invalid='ignore'):
        values = np.log(a.values)
    return _node(values, (a,), 'log', backward)


def exp(a: Tensor2) -> Tensor2:
    out = np.exp(a.values)

    def backward(g):
        return [(a, g * out)]
    return _node(out, (a,), 'exp', backward)


def power(a: Tensor2, p: float) -> Tensor2:
    def backward(g):
        return [(a, g * p * np.power(a.values, p - 1.0))]
    return _node(np.power(a.values, p), (a,), 'power', backward)


def sqrt(a: Tensor2, eps: float = SQRT_EPS) -> Tensor2:
    """
    開方: 前向為精確的 sqrt(max(x, 0))，
    反向導數 1 / (2 sqrt(x + eps))，零點處梯度有限
    """
    clipped = np.maximum(a.values, 0.0)
    out = np.sqrt(clipped)

    def backward(g):
        return [(a, g * 0.5 / np.sqrt(clipped + eps))]
    return _node(out, (a,), 'sqrt', backward)


def gather_rows(a: Tensor2, index: Sequence[int]) -> Tensor2:
    """按行索引取子矩陣，索引可重複 (梯度累加)"""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ShapeError('gather_rows', a.shape, (int(idx.min()), int(idx.max())))

    def backward(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, idx, g)
        return [(a, grad)]
    return _node(a.values[idx], (a,), 'gather_rows', backward)


def pick(a: Tensor2, rows: Sequence[int], cols: Sequence[int]) -> Tensor2:
    """取逐元素 a[rows[i], cols[i]] -> n x 1"""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    if r.shape != c.shape:
        raise ShapeError('pick', r.shape, c.shape)

    def backward(g):
        grad = np.zeros_like(a.values)
        np.add.at(grad, (r, c), g[:, 0])
        return [(a, grad)]
    return _node(a.values[r, c].reshape(-1, 1), (a,), 'pick', backward)


def concat_rows(parts: Iterable[Tensor2]) -> Tensor2:
    parts = list(parts)
    if not parts:
        raise ShapeError('concat_rows', (0, 0))
    cols = parts[0].cols
    for p in parts[1:]:
        if p.cols != cols:
            raise ShapeError('concat_rows', parts[0].shape, p.shape)
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def backward(g):
        return [(p, g[bounds[i]:bounds[i + 1]]) for i, p in enumerate(parts)]
    return _node(np.concatenate([p.values for p in parts], axis=0), parts, 'concat_rows', backward)


def reshape(a: Tensor2, rows: int, cols: int) -> Tensor2:
    if rows * cols != a.values.size:
        raise ShapeError('reshape', a.shape, (rows, cols))

    def backward(g):
        return [(a, g.reshape(a.shape))]
    return _node(a.values.reshape(rows, cols), (a,), 'reshape', backward)


def transpose(a: Tensor2) -> Tensor2:
    def backward(g):
        return [(a, g.T)]
    return _node(a.values.T.copy(), (a,), 'transpose', backward)


def normalize_rows(a: Tensor2) -> Tensor2:
    """每行除以其 L2 範數；零範數行由調用方預先檢查"""
    norms = np.sqrt((a.values * a.values).sum(axis=1, keepdims=True))
    out = a.values / norms

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return [(a, (g - out * dot) / norms)]
    return _node(out, (a,), 'normalize_rows', backward)


# ----------------------------------------------------------------------
# 梯度檢查

def grad_check(f: Callable[[Tensor2], Tensor2], x: Union[Tensor2, np.ndarray],
               eps: float = 1e-5) -> float:
    """
    用中心差分校驗反向模式梯度

    Args:
        f: 標量值 (1 x 1) 張量函數
        x: 檢查點
        eps: 差分步長

    Returns:
        最大相對誤差，分母為 max(|analytic|, |numeric|, 1e-8)
    """
    if eps <= 0:
        raise ValueError("eps 必須大於0")
    base = np.array(x.values if isinstance(x, Tensor2) else x, dtype=np.float64)
    if base.ndim == 1:
        base = base.reshape(1, -1)

    point = Tensor2(base.copy(), requires_grad=True)
    out = f(point)
    if out.shape != (1, 1):
        raise ShapeError('grad_check', out.shape)
    if not np.all(np.isfinite(out.values)):
        raise NumericError("grad_check: 函數值非有限")
    out.backward()
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        f_plus = f(Tensor2(plus)).item()
        f_minus = f(Tensor2(minus)).item()
        numeric[idx] = (f_plus - f_minus) / (2.0 * eps)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("grad_check: 梯度非有限")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    error = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
    logger.debug(f"grad_check 最大相對誤差: {error:.3e}")
    return error


# 原語名 sum 的別名，本模塊內部只用 total
sum = total  # noqa: A001
