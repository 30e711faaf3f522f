"""
条件自回归 Transformer Agent
以两 token 提示为前缀的音乐 token 语言模型：参数初始化、前向、训练、似然评估、采样与检查点
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from agents.dataset_builder import PairedExample, Prompt
from config.config import ConfigError, ModelConfig, SamplerConfig, TrainSchedule
from utils.numerics import (AdamState, NonFiniteError, Tensor, adam_step, cross_entropy, embedding, gradients,
                            layer_norm, log_softmax_array, make_leaves, matmul, no_grad,
                            relu, reshape, softmax, softmax_array, transpose)
from utils.tensor_io import TensorBundleError, read_bundle, tensors_sha256, write_bundle

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "ttm-checkpoint"


class ModelError(Exception):
    """模型错误基类"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class CheckpointError(ModelError):
    """检查点读写或校验失败"""


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """参数名称到形状的映射"""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "tok_emb": (cfg.joint_vocab, d),
        "pos_emb": (cfg.context_len, d),
        "ln_f.gain": (d,),
        "ln_f.bias": (d,),
        "head.w": (d, cfg.music_vocab),
        "head.b": (cfg.music_vocab,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    return shapes


@dataclass
class ModelParams:
    """模型参数 θ（遗忘后同一类型承载 θ⁻）"""
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(ModelConfig(**asdict(self.config)),
                           {name: arr.copy() for name, arr in self.tensors.items()})

    def content_hash(self) -> str:
        return tensors_sha256(self.tensors)

    def validate(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            raise ModelError(f"参数名称与配置不一致: {sorted(set(expected) ^ set(self.tensors))}")
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ModelError(f"{name}: 形状 {arr.shape} 与配置要求 {shape} 不一致")
            if not np.isfinite(arr).all():
                raise ModelError(f"{name}: 含有非有限值")

    def max_abs_delta(self, other: "ModelParams") -> float:
        return max(float(np.abs(self.tensors[n] - other.tensors[n]).max()) for n in self.tensors)


def init_params(cfg: ModelConfig) -> ModelParams:
    """
    按 init_seed 初始化参数：权重 ~ N(0, init_std²)，层归一化增益为 1，
    偏置与输出投影为 0，因此未训练模型在音乐词表上恰好均匀
    """
    try:
        cfg.validate()
    except ConfigError as e:
        raise ModelError(f"模型配置无效: {e}") from e
    rng = np.random.default_rng(cfg.init_seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head.") or name.endswith((".bias", ".b1", ".b2", ".bo")):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return ModelParams(ModelConfig(**asdict(cfg)), tensors)


# ---------------------------------------------------------------------------
# 前向计算
# ---------------------------------------------------------------------------

def _prompt_ids(cfg: ModelConfig, prompt: Prompt) -> Tuple[int, int]:
    if not 0 <= prompt.genre < cfg.n_genres or not 0 <= prompt.mood < cfg.n_moods:
        raise ModelError(f"提示 {prompt} 超出提示词表")
    genre_id, mood_id = prompt.token_ids(cfg.n_genres)
    return cfg.music_vocab + genre_id, cfg.music_vocab + mood_id


def _check_tokens(cfg: ModelConfig, tokens: np.ndarray, max_len: int):
    if tokens.ndim != 1 or len(tokens) > max_len:
        raise ModelError(f"序列长度 {len(tokens)} 超过上限 {max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.music_vocab):
        raise ModelError(f"token 超出音乐词表 [0, {cfg.music_vocab})")


def encode_batch(cfg: ModelConfig, examples: Sequence) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    把 (提示, 序列) 样本编码为教师强制的输入、目标与损失掩码
    位置 0 为风格 token，不计入损失；位置 1..L 预测 y_0..y_{L-1}
    """
    L = cfg.seq_len
    B = len(examples)
    inputs = np.empty((B, L + 1), dtype=np.int64)
    targets = np.zeros((B, L + 1), dtype=np.int64)
    mask = np.zeros((B, L + 1), dtype=bool)
    for b, example in enumerate(examples):
        tokens = np.asarray(example.tokens, dtype=np.int64)
        if len(tokens) != L:
            raise ModelError(f"样本长度 {len(tokens)} 与 L={L} 不一致")
        _check_tokens(cfg, tokens, L)
        inputs[b, :2] = _prompt_ids(cfg, example.prompt)
        inputs[b, 2:] = tokens[:-1]
        targets[b, 1:] = tokens
        mask[b, 1:] = True
    return inputs, targets, mask


def _forward(leaves: Dict[str, Tensor], cfg: ModelConfig, inputs: np.ndarray) -> Tensor:
    """inputs: (B, T) 联合词表 id；返回 (B, T, V_m) logits"""
    B, T = inputs.shape
    if T > cfg.context_len:
        raise ModelError(f"输入长度 {T} 超过上下文长度 {cfg.context_len}")
    H = cfg.n_heads
    dh = cfg.d_model // H
    scale = 1.0 / math.sqrt(dh)
    causal = np.tril(np.ones((T, T), dtype=bool))

    x = embedding(leaves["tok_emb"], inputs) + embedding(leaves["pos_emb"], np.arange(T))
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = layer_norm(x, leaves[p + "ln1.gain"], leaves[p + "ln1.bias"])

        def heads(t: Tensor) -> Tensor:
            return transpose(reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = heads(h @ leaves[p + "attn.wq"])
        k = heads(h @ leaves[p + "attn.wk"])
        v = heads(h @ leaves[p + "attn.wv"])
        att = softmax((q @ transpose(k, (0, 1, 3, 2))) * scale, causal)
        ctx = reshape(transpose(att @ v, (0, 2, 1, 3)), (B, T, cfg.d_model))
        x = x + (ctx @ leaves[p + "attn.wo"] + leaves[p + "attn.bo"])

        h = layer_norm(x, leaves[p + "ln2.gain"], leaves[p + "ln2.bias"])
        x = x + (relu(h @ leaves[p + "ffn.w1"] + leaves[p + "ffn.b1"]) @ leaves[p + "ffn.w2"]
                 + leaves[p + "ffn.b2"])

    h = layer_norm(x, leaves["ln_f.gain"], leaves["ln_f.bias"])
    return matmul(h, leaves["head.w"]) + leaves["head.b"]


def _constant_leaves(params: ModelParams) -> Dict[str, Tensor]:
    return {name: Tensor(arr) for name, arr in params.tensors.items()}


def forward_logits(params: ModelParams, prompt: Prompt, prefix: Sequence[int]) -> np.ndarray:
    """
    给定提示与音乐前缀，返回 (len(prefix)+1, V_m) 的 logits，
    第 t 行是在前 t 个音乐 token 条件下对下一个 token 的预测
    """
    cfg = params.config
    tokens = np.asarray(list(prefix), dtype=np.int64)
    _check_tokens(cfg, tokens, cfg.seq_len)
    inputs = np.concatenate([np.asarray(_prompt_ids(cfg, prompt), dtype=np.int64), tokens])[None, :]
    with no_grad():
        logits = _forward(_constant_leaves(params), cfg, inputs)
    return logits.data[0, 1:, :]


def teacher_forced_logits(params: ModelParams, example: PairedExample) -> np.ndarray:
    """整条序列的教师强制 logits，形状 (L, V_m)"""
    cfg = params.config
    inputs, _, _ = encode_batch(cfg, [example])
    with no_grad():
        logits = _forward(_constant_leaves(params), cfg, inputs)
    return logits.data[0, 1:, :]


def batch_loss(leaves: Dict[str, Tensor], cfg: ModelConfig, examples: Sequence) -> Tensor:
    """一个批次在音乐位置上的平均交叉熵（可求导）"""
    inputs, targets, mask = encode_batch(cfg, examples)
    return cross_entropy(_forward(leaves, cfg, inputs), targets, mask)


def per_example_nll(params: ModelParams, examples: Sequence, batch_size: int = 256) -> np.ndarray:
    """逐样本平均负对数似然（nats/token）"""
    cfg = params.config
    leaves = _constant_leaves(params)
    result = np.empty(len(examples))
    with no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            inputs, targets, mask = encode_batch(cfg, chunk)
            logits = _forward(leaves, cfg, inputs).data
            log_probs = log_softmax_array(logits)
            picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
            result[start:start + len(chunk)] = -(picked * mask).sum(axis=1) / mask.sum(axis=1)
    return result


def nll(params: ModelParams, example: PairedExample) -> float:
    """单个样本的平均负对数似然"""
    inputs, targets, mask = encode_batch(params.config, [example])
    with no_grad():
        loss = cross_entropy(_forward(_constant_leaves(params), params.config, inputs), targets, mask)
    return loss.item()


def evaluate_nll(params: ModelParams, examples: Sequence, batch_size: int = 256) -> float:
    """样本集合上的平均负对数似然"""
    if not examples:
        raise ModelError("评估集合为空")
    return float(per_example_nll(params, examples, batch_size).mean())


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

def train(params: ModelParams, examples: Sequence[PairedExample],
          schedule: TrainSchedule) -> Tuple[ModelParams, List[float]]:
    """
    在均匀采样的批次上用 Adam 最小化平均负对数似然

    Args:
        params: 初始参数（不会被修改）
        examples: 训练样本
        schedule: 步数、批大小、学习率与种子

    Returns:
        (训练后的参数, 每步损失曲线)

    Raises:
        ModelError: 训练集为空或损失出现非有限值（附带步号）
    """
    if not examples:
        raise ModelError("训练集为空")
    cfg = params.config
    rng = np.random.default_rng(schedule.seed)
    tensors = {name: arr.copy() for name, arr in params.tensors.items()}
    state = AdamState.zeros_like(tensors)
    curve: List[float] = []

    logger.info(f"开始训练: {schedule.steps} 步, batch={schedule.batch_size}, lr={schedule.lr}")
    for step in range(schedule.steps):
        idx = rng.integers(len(examples), size=schedule.batch_size)
        leaves = make_leaves(tensors)
        try:
            loss = batch_loss(leaves, cfg, [examples[i] for i in idx])
        except NonFiniteError as e:
            raise ModelError(f"第 {step} 步前向计算出现非有限值: {e}", step=step) from e
        value = loss.item()
        if not math.isfinite(value):
            raise ModelError(f"第 {step} 步训练损失为非有限值", step=step)
        grads = gradients(loss, leaves)
        tensors, state = adam_step(tensors, grads, state, schedule.lr)
        curve.append(value)
        if schedule.log_every and (step + 1) % schedule.log_every == 0:
            recent = float(np.mean(curve[-schedule.log_every:]))
            logger.info(f"训练步 {step + 1}/{schedule.steps}: 最近平均损失 {recent:.4f}")

    trained = ModelParams(ModelConfig(**asdict(cfg)), tensors)
    if curve:
        logger.info(f"训练完成: 最终损失 {curve[-1]:.4f}")
    return trained, curve


# ---------------------------------------------------------------------------
# 采样
# ---------------------------------------------------------------------------

def _sample_rows(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    if sampler.temperature < 1e-6:
        return logits.argmax(axis=-1)
    z = logits / sampler.temperature
    vocab = z.shape[-1]
    if 0 < sampler.top_k < vocab:
        cutoff = np.partition(z, vocab - sampler.top_k, axis=-1)[:, vocab - sampler.top_k][:, None]
        z = np.where(z >= cutoff, z, -np.inf)
    cdf = np.cumsum(softmax_array(z), axis=-1)
    u = rng.random(len(z))
    return np.minimum((cdf <= u[:, None]).sum(axis=-1), vocab - 1)


def generate_batch(params: ModelParams, prompts: Sequence[Prompt], sampler: SamplerConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """
    为一组提示并行进行祖先采样

    Returns:
        (len(prompts), L) 的整数数组
    """
    cfg = params.config
    try:
        sampler.validate(cfg.music_vocab)
    except ConfigError as e:
        raise ModelError(f"采样配置无效: {e}") from e
    n = len(prompts)
    sequence = np.empty((n, cfg.seq_len + 2), dtype=np.int64)
    for b, prompt in enumerate(prompts):
        sequence[b, :2] = _prompt_ids(cfg, prompt)
    leaves = _constant_leaves(params)
    with no_grad():
        for t in range(cfg.seq_len):
            logits = _forward(leaves, cfg, sequence[:, :t + 2]).data[:, -1, :]
            sequence[:, t + 2] = _sample_rows(logits, sampler, rng)
    return sequence[:, 2:].copy()


def generate(params: ModelParams, prompt: Prompt, sampler: SamplerConfig,
             rng: np.random.Generator) -> Tuple[int, ...]:
    """为单个提示生成长度为 L 的音乐序列"""
    return tuple(int(t) for t in generate_batch(params, [prompt], sampler, rng)[0])


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> str:
    """写入检查点，返回文件 sha256"""
    params.validate()
    digest = write_bundle(path, CHECKPOINT_KIND, asdict(params.config), params.tensors)
    logger.info(f"检查点已保存: {path}")
    return digest


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"检查点不存在: {path}")
    try:
        header, tensors = read_bundle(path, expected_kind=CHECKPOINT_KIND)
    except TensorBundleError as e:
        raise CheckpointError(str(e)) from e
    known = {f.name for f in fields(ModelConfig)}
    if set(header) != known:
        raise CheckpointError(f"{path}: 头信息字段与 ModelConfig 不一致")
    params = ModelParams(ModelConfig(**header), tensors)
    try:
        params.validate()
    except ModelError as e:
        raise CheckpointError(f"{path}: {e}") from e
    return params


class TTMModel:
    """模型 Agent：封装初始化、训练与采样"""

    def __init__(self, model_config: ModelConfig):
        self.model_config = model_config

    def fit(self, examples: Sequence[PairedExample], schedule: TrainSchedule) -> Tuple[ModelParams, List[float]]:
        return train(init_params(self.model_config), examples, schedule)
