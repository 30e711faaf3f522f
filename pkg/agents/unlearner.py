"""
遗忘 Agent
从原始参数 θ 与遗忘集 F 出发，用梯度上升（GA）或随机标注（RL）得到 θ⁻，
并在遗忘损失爆炸或出现非有限值时提前停止
"""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from agents.dataset_builder import PairedExample, Prompt
from agents.ttm_model import ModelParams, batch_loss, per_example_nll
from config.config import RELABEL_POLICIES, UNLEARN_METHODS, ConfigError, ModelConfig, UnlearnConfig
from utils.numerics import AdamState, NonFiniteError, adam_step, gradients, make_leaves

logger = logging.getLogger(__name__)


class UnlearnError(Exception):
    """遗忘阶段错误"""


class HaltReason(Enum):
    """遗忘停止原因"""
    BUDGET = "budget"
    EXPLOSION = "explosion"
    NON_FINITE = "non-finite"


@dataclass(frozen=True)
class RelabeledExample:
    """保留原提示、目标替换为均匀随机序列 ỹ 的样本"""
    prompt: Prompt
    y_tilde: Tuple[int, ...]

    @property
    def tokens(self) -> Tuple[int, ...]:
        return self.y_tilde


@dataclass
class UnlearnTrace:
    """每步遗忘损失与更新范数"""
    method: str
    threshold: float
    forget_loss: List[float] = field(default_factory=list)
    update_norm: List[float] = field(default_factory=list)
    halt_reason: HaltReason = HaltReason.BUDGET

    @property
    def steps_executed(self) -> int:
        return len(self.forget_loss)

    def record(self, loss: float, norm: float):
        self.forget_loss.append(float(loss))
        self.update_norm.append(float(norm))

    def to_csv_text(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", "forget_loss", "update_norm"])
        for step, (loss, norm) in enumerate(zip(self.forget_loss, self.update_norm)):
            writer.writerow([step, repr(loss), repr(norm)])
        buffer.write(f"# halt_reason={self.halt_reason.value}\n")
        return buffer.getvalue()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text(), encoding="utf-8")
        return path


def read_trace(path: Union[str, Path], method: str = "", threshold: float = float("nan")) -> UnlearnTrace:
    """读取 CSV 格式的遗忘轨迹"""
    path = Path(path)
    if not path.exists():
        raise UnlearnError(f"遗忘轨迹不存在: {path}")
    trace = UnlearnTrace(method, threshold)
    halt = None
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("# halt_reason="):
            halt = line.split("=", 1)[1].strip()
        elif line:
            rows.append(line)
    if halt is None:
        raise UnlearnError(f"{path}: 缺少 halt_reason 行")
    for row in list(csv.DictReader(rows)):
        trace.record(float(row["forget_loss"]), float(row["update_norm"]))
    trace.halt_reason = HaltReason(halt)
    return trace


def random_relabel(forget: Sequence[PairedExample], vocab_size: int, rng: np.random.Generator,
                   policy: str = "fixed-per-sample") -> List[RelabeledExample]:
    """
    为每个遗忘样本指定新的目标 ỹ，提示保持不变

    Args:
        forget: 遗忘集
        vocab_size: 音乐词表大小
        rng: 随机数生成器
        policy: fixed-per-sample 抽取均匀随机序列并在整次运行中固定；
            resample-each-epoch 同样均匀抽取，由调用方在每轮重抽；
            shuffle 把遗忘集自身的序列随机置换后分配给各提示
    """
    if not forget:
        raise UnlearnError("遗忘集为空")
    if policy not in RELABEL_POLICIES:
        raise UnlearnError(f"未知的重标注策略 {policy!r}，可选: {', '.join(RELABEL_POLICIES)}")
    if vocab_size < 1:
        raise UnlearnError("音乐词表大小必须为正")
    if policy == "shuffle":
        order = rng.permutation(len(forget))
        return [RelabeledExample(ex.prompt, tuple(forget[int(j)].tokens)) for ex, j in zip(forget, order)]
    return [
        RelabeledExample(ex.prompt, tuple(int(t) for t in rng.integers(vocab_size, size=len(ex.tokens))))
        for ex in forget
    ]


class _EpochBatches:
    """按轮次打乱的批次迭代；批大小不小于集合时每步即一轮"""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.cursor = 0
        self.epoch = -1

    def next(self) -> Tuple[np.ndarray, bool]:
        """返回 (样本下标, 是否开始新一轮)"""
        new_epoch = False
        if self.cursor + self.batch_size > len(self.order):
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
            self.epoch += 1
            new_epoch = True
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx, new_epoch


def _check_inputs(params: ModelParams, forget: Sequence[PairedExample], cfg: UnlearnConfig, method: str):
    if not forget:
        raise UnlearnError("遗忘集为空")
    if cfg.method.lower() != method:
        raise UnlearnError(f"配置方法为 {cfg.method!r}，与调用的 {method} 不一致")
    try:
        cfg.validate(params.config.music_vocab)
    except ConfigError as e:
        raise UnlearnError(f"遗忘配置无效: {e}") from e


def _update_norm(old: dict, new: dict) -> float:
    return math.sqrt(sum(float(((new[n] - old[n]) ** 2).sum()) for n in old))


def _run(params: ModelParams, forget: Sequence[PairedExample], cfg: UnlearnConfig,
         method: str) -> Tuple[ModelParams, UnlearnTrace]:
    model_cfg = params.config
    vocab = model_cfg.music_vocab
    threshold = cfg.resolved_threshold(vocab)
    sign = -1 if method == "ga" else 1
    tensors = {name: arr.copy() for name, arr in params.tensors.items()}
    state = AdamState.zeros_like(tensors)
    trace = UnlearnTrace(method, threshold)

    batches = _EpochBatches(len(forget), cfg.batch_size, np.random.default_rng([cfg.seed, 0]))
    relabel_rng = np.random.default_rng([cfg.seed, 1])
    relabeled: Optional[List[RelabeledExample]] = None
    if method == "rl":
        relabeled = random_relabel(forget, vocab, relabel_rng, cfg.relabel_policy)

    logger.info(f"开始 {method.upper()} 遗忘: |F|={len(forget)}, 最多 {cfg.max_steps} 步, "
                f"lr={cfg.lr}, 爆炸阈值 {threshold:.3f}")
    for step in range(cfg.max_steps):
        idx, new_epoch = batches.next()
        originals = [forget[i] for i in idx]
        leaves = make_leaves(tensors)
        if method == "rl" and new_epoch and batches.epoch > 0 and cfg.relabel_policy == "resample-each-epoch":
            relabeled = random_relabel(forget, vocab, relabel_rng, cfg.relabel_policy)
        try:
            # 轨迹与爆炸保护都看整个遗忘集（RL 为原始遗忘对）上的损失
            tracked = float(per_example_nll(ModelParams(model_cfg, tensors), forget).mean())
            if method == "ga":
                loss = batch_loss(leaves, model_cfg, originals)
            else:
                loss = batch_loss(leaves, model_cfg, [relabeled[i] for i in idx])
        except NonFiniteError:
            loss, tracked = None, float("nan")

        if loss is None or not (math.isfinite(tracked) and math.isfinite(loss.item())):
            trace.record(tracked, 0.0)
            trace.halt_reason = HaltReason.NON_FINITE
            logger.warning(f"第 {step} 步遗忘损失为非有限值，停止")
            break
        if tracked > threshold:
            trace.record(tracked, 0.0)
            trace.halt_reason = HaltReason.EXPLOSION
            logger.warning(f"第 {step} 步遗忘损失 {tracked:.4f} 超过阈值 {threshold:.4f}，停止")
            break

        grads = gradients(loss, leaves)
        new_tensors, state = adam_step(tensors, grads, state, cfg.lr, sign=sign)
        trace.record(tracked, _update_norm(tensors, new_tensors))
        tensors = new_tensors
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info(f"{method.upper()} 步 {step + 1}/{cfg.max_steps}: 遗忘损失 {tracked:.4f}")

    logger.info(f"{method.upper()} 遗忘结束: 执行 {trace.steps_executed} 步, 停止原因 {trace.halt_reason.value}")
    return ModelParams(ModelConfig(**asdict(model_cfg)), tensors), trace


def ga_unlearn(params: ModelParams, forget: Sequence[PairedExample],
               cfg: UnlearnConfig) -> Tuple[ModelParams, UnlearnTrace]:
    """
    梯度上升遗忘：在遗忘批次的平均负对数似然上做 sign=-1 的 Adam 更新

    Returns:
        (θ⁻, 轨迹)；θ 不会被修改
    """
    _check_inputs(params, forget, cfg, "ga")
    return _run(params, forget, cfg, "ga")


def rl_unlearn(params: ModelParams, forget: Sequence[PairedExample],
               cfg: UnlearnConfig) -> Tuple[ModelParams, UnlearnTrace]:
    """
    随机标注遗忘：朝随机目标 ỹ 做常规下降，轨迹记录原始遗忘对上的损失
    """
    _check_inputs(params, forget, cfg, "rl")
    return _run(params, forget, cfg, "rl")


def unlearn(params: ModelParams, forget: Sequence[PairedExample],
            cfg: UnlearnConfig) -> Tuple[ModelParams, UnlearnTrace]:
    """按 cfg.method 分派到 GA 或 RL"""
    method = cfg.method.lower()
    if method not in UNLEARN_METHODS:
        raise UnlearnError(f"未知的遗忘方法 {cfg.method!r}，可选: {', '.join(UNLEARN_METHODS)}")
    if method == "ga":
        return ga_unlearn(params, forget, cfg)
    return rl_unlearn(params, forget, cfg)


class Unlearner:
    """遗忘 Agent：持有一种方法的配置"""

    def __init__(self, unlearn_config: UnlearnConfig):
        self.unlearn_config = unlearn_config

    def run(self, params: ModelParams, forget: Sequence[PairedExample]) -> Tuple[ModelParams, UnlearnTrace]:
        original_hash = params.content_hash()
        unlearned, trace = unlearn(params, forget, self.unlearn_config)
        if params.content_hash() != original_hash:
            raise UnlearnError("原始参数在遗忘过程中被修改")
        return unlearned, trace
