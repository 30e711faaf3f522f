"""
数值计算内核
提供带反向自动微分的张量运算、Adam 优化器，以及对称矩阵特征分解与半正定矩阵平方根
"""

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class NumericsError(Exception):
    """数值计算错误基类"""


class ShapeMismatchError(NumericsError):
    """形状不匹配"""


class NonFiniteError(NumericsError):
    """出现 NaN/Inf"""


class IndexRangeError(NumericsError):
    """索引超出词表范围"""


class NotPSDError(NumericsError):
    """矩阵不是半正定矩阵"""


class ConvergenceError(NumericsError):
    """特征分解未收敛"""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """当前线程是否记录计算图"""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """在该上下文内不记录计算图（评估与生成使用）"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """稠密 float64 张量，可作为计算图节点"""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def is_valid(self) -> bool:
        """所有元素均为有限值"""
        return bool(np.isfinite(self.data).all())

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"只有单元素张量可以转换为标量，当前形状 {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原始形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} 的输入包含非有限值")


# ---------------------------------------------------------------------------
# 基本运算
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """矩阵乘法，支持前导批次维度广播"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"矩阵乘法维度不匹配: {a.shape} × {b.shape}")

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0

    def backward(g):
        return (g * active,)

    return _make(np.where(active, a.data, 0.0), (a,), backward, "relu")


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def reduce_sum(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def softmax(logits: TensorLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    沿最后一维的 softmax，使用减最大值保证数值稳定

    Args:
        logits: 输入张量
        mask: 可选布尔掩码（可广播），False 的位置概率为 0；每行至少保留一个位置
    """
    logits = as_tensor(logits)
    _check_finite(logits.data, "softmax")
    z = logits.data if mask is None else np.where(mask, logits.data, -np.inf)
    shifted = z - z.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _make(probs, (logits,), backward, "softmax")


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def backward(g):
        grad_gain = _unbroadcast(g * x_hat, gain.shape)
        grad_bias = _unbroadcast(g, bias.shape)
        g_hat = g * gain.data
        grad_x = inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return _make(x_hat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def embedding(table: TensorLike, indices) -> Tensor:
    """按索引查表，indices 为任意形状的整数数组"""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexRangeError(f"索引超出范围 [0, {table.shape[0]})")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(table.data[idx], (table,), backward, "embedding")


def l2_normalize(x: TensorLike, eps: float = 1e-12) -> Tensor:
    """沿最后一维归一化为单位长度"""
    x = as_tensor(x)
    norm = np.maximum(np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True)), eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


def log_softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def cross_entropy(logits: TensorLike, targets, mask=None) -> Tensor:
    """
    掩码位置上的平均负对数似然（nats）

    Args:
        logits: (..., V) 张量
        targets: 与 logits 前导维度一致的整数目标
        mask: 布尔掩码，True 的位置参与平均；None 表示全部参与
    """
    logits = as_tensor(logits)
    vocab = logits.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeMismatchError(f"目标形状 {tgt.shape} 与 logits 形状 {logits.shape} 不一致")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexRangeError(f"目标 token 超出范围 [0, {vocab})")
    keep = np.ones(tgt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != tgt.shape:
        raise ShapeMismatchError(f"掩码形状 {keep.shape} 与目标形状 {tgt.shape} 不一致")
    count = int(keep.sum())
    if count == 0:
        raise NumericsError("交叉熵掩码为空")
    _check_finite(logits.data, "cross_entropy")

    log_probs = log_softmax_array(logits.data)
    picked = np.take_along_axis(log_probs, tgt[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def backward(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, tgt[..., None], np.take_along_axis(grad, tgt[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (keep[..., None] * (float(g) / count)),)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# 计算图与反向传播
# ---------------------------------------------------------------------------

@dataclass
class Graph:
    """按拓扑顺序记录的计算图"""
    nodes: List[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
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
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self) -> List[Tensor]:
        return [node for node in self.nodes if node.is_leaf]


def backward(loss: Tensor, leaves: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """
    反向传播，梯度累加到各叶子节点的 grad

    Args:
        loss: 标量损失节点
        leaves: 需要返回梯度的叶子；未连接到损失的叶子返回全零梯度

    Returns:
        与 leaves 一一对应的梯度列表
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(f"损失必须是标量，当前形状 {loss.shape}")
    graph = Graph.from_output(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    if pending:
        raise NumericsError(f"计算图中存在 {len(pending)} 个未访问的依赖")

    if leaves is None:
        return [leaf.grad for leaf in graph.leaves]
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def gradients(loss: Tensor, named_leaves: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """对一组命名叶子求梯度"""
    names = list(named_leaves)
    grads = backward(loss, [named_leaves[name] for name in names])
    return dict(zip(names, grads))


def make_leaves(arrays: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in arrays.items()}


def numerical_gradient(fn: Callable[[Dict[str, np.ndarray]], float],
                       params: Mapping[str, np.ndarray],
                       eps: float = 1e-5) -> Dict[str, np.ndarray]:
    """中心差分数值梯度，用于校验自动微分"""
    base = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    result = {}
    for name, arr in base.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = fn(base)
            flat[i] = original - eps
            minus = fn(base)
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
        result[name] = grad
    return result


# ---------------------------------------------------------------------------
# Adam 优化器
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam 一阶/二阶矩累积量"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0  # 因非有限梯度跳过的更新次数

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kwargs) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in params.items()},
            v={name: np.zeros_like(arr) for name, arr in params.items()},
            **kwargs
        )


def adam_step(params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray],
              state: AdamState,
              lr: float,
              sign: int = 1) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    执行一次带偏差修正的 Adam 更新

    Args:
        params: 参数字典（不会被原地修改）
        grads: 与 params 同构的梯度
        state: 优化器状态（不会被原地修改）
        lr: 学习率，必须非负
        sign: +1 为下降，-1 为上升（梯度上升遗忘）

    Returns:
        (新参数, 新状态)；梯度非有限时跳过更新并计数
    """
    if sign not in (1, -1):
        raise NumericsError(f"sign 只能是 +1 或 -1，当前为 {sign}")
    if lr < 0 or not math.isfinite(lr):
        raise NumericsError(f"学习率必须是非负有限值，当前为 {lr}")
    if set(params) != set(grads):
        raise ShapeMismatchError(f"参数与梯度名称不一致: {sorted(set(params) ^ set(grads))}")
    for name, arr in params.items():
        if grads[name].shape != arr.shape:
            raise ShapeMismatchError(f"{name}: 梯度形状 {grads[name].shape} 与参数形状 {arr.shape} 不一致")
        if state.m[name].shape != arr.shape or state.v[name].shape != arr.shape:
            raise ShapeMismatchError(f"{name}: 优化器累积量形状与参数不一致")

    if not all(np.isfinite(g).all() for g in grads.values()):
        logger.warning(f"第 {state.step + 1} 次更新的梯度包含非有限值，已跳过")
        skipped = AdamState(dict(state.m), dict(state.v), state.step, state.beta1,
                            state.beta2, state.eps, state.skipped + 1)
        return dict(params), skipped

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, arr in params.items():
        g = grads[name] if sign > 0 else -grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        new_params[name] = arr - lr * update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, step, b1, b2, state.eps, state.skipped)


# ---------------------------------------------------------------------------
# 对称矩阵线性代数
# ---------------------------------------------------------------------------

def _as_square(a: TensorLike, op: str) -> np.ndarray:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeMismatchError(f"{op} 需要方阵，当前形状 {arr.shape}")
    _check_finite(arr, op)
    return arr


def sym_eig(a: TensorLike, symmetry_tol: float = 1e-9) -> Tuple[np.ndarray, np.ndarray]:
    """
    对称矩阵特征分解

    Returns:
        (升序特征值, 列正交的特征向量矩阵)
    """
    arr = _as_square(a, "sym_eig")
    asymmetry = float(np.abs(arr - arr.T).max()) if arr.size else 0.0
    if asymmetry > symmetry_tol * max(1.0, float(np.abs(arr).max())):
        raise NumericsError(f"矩阵不对称，最大偏差 {asymmetry:.3e}")
    sym = 0.5 * (arr + arr.T)
    try:
        values, vectors = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError(f"对称特征分解未收敛: {e}") from e
    return values, vectors


def psd_sqrt(a: TensorLike, clamp_tol: float = 1e-12, negative_tol: float = 1e-6) -> np.ndarray:
    """
    半正定矩阵的对称平方根

    任一特征值低于 -negative_tol（绝对阈值）即视为矩阵不是半正定；
    其余低于 clamp_tol × max(1, |λ|max) 的特征值截断为 0
    """
    values, vectors = sym_eig(a)
    if not values.size:
        return np.zeros_like(vectors)
    if values.min() < -negative_tol:
        raise NotPSDError(f"矩阵存在明显为负的特征值 {values.min():.3e}")
    scale = max(1.0, float(np.abs(values).max()))
    if values.min() < 0:
        logger.debug(f"psd_sqrt: 截断负特征值 {values.min():.3e}")
    clamped = np.where(values < clamp_tol * scale, 0.0, values)
    root = (vectors * np.sqrt(clamped)) @ vectors.T
    return 0.5 * (root + root.T)
