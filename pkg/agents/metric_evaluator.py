"""
评估指标 Agent
FAD/KL/CLAP 的桌面规模对应物：
- 计数特征 + 固定随机投影的嵌入器，配合 Fréchet 距离
- 冻结的风格分类器，配合参考与生成之间的 KL 散度
- 对比学习训练的双塔编码器，配合余弦对齐分数
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from agents.dataset_builder import DatasetSplits, PairedExample, Prompt
from agents.ttm_model import ModelParams, generate_batch
from config.config import MetricsConfig, SamplerConfig
from utils.numerics import (AdamState, Tensor, adam_step, cross_entropy, embedding, gradients,
                            l2_normalize, make_leaves, matmul, mul, psd_sqrt, relu,
                            softmax_array, transpose)
from utils.tensor_io import TensorBundleError, read_bundle, tensors_sha256, write_bundle

logger = logging.getLogger(__name__)

SPLITS = ("forget", "remain", "unseen")
REQUIRED_SPLITS = ("forget", "remain")
MODEL_LABELS = ("Original", "GA", "RL")

CLASSIFIER_MIN_ACCURACY = 0.9
ENCODER_MIN_MARGIN = 0.1
ENCODER_MIN_RETRIEVAL = 0.7


class MetricError(Exception):
    """评估错误基类"""


class FrozenOracleError(MetricError):
    """冻结评估器的权重哈希与训练时记录不一致"""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# 特征嵌入与 Fréchet 距离
# ---------------------------------------------------------------------------

@dataclass
class FeatureEmbedder:
    """归一化二元组计数 ‖ 归一化一元计数，经固定随机矩阵 P 投影"""
    vocab_size: int
    projection: np.ndarray   # (d_e, V² + V)

    @classmethod
    def create(cls, vocab_size: int, dim: int, seed: int) -> "FeatureEmbedder":
        rng = np.random.default_rng(seed)
        return cls(vocab_size, _readonly(rng.normal(size=(dim, vocab_size * vocab_size + vocab_size))))

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def features(self, tokens: Sequence[int]) -> np.ndarray:
        """长度为 V² + V 的计数特征"""
        V = self.vocab_size
        arr = np.asarray(tokens, dtype=np.int64)
        if arr.size == 0:
            raise MetricError("无法嵌入空序列")
        if arr.min() < 0 or arr.max() >= V:
            raise MetricError(f"token 超出词表 [0, {V})")
        bigram = np.zeros(V * V)
        if arr.size >= 2:
            bigram = np.bincount(arr[:-1] * V + arr[1:], minlength=V * V) / (arr.size - 1)
        unigram = np.bincount(arr, minlength=V) / arr.size
        return np.concatenate([bigram, unigram])

    def embed(self, tokens: Sequence[int]) -> np.ndarray:
        return self.projection @ self.features(tokens)

    def embed_many(self, sequences: Sequence[Sequence[int]], chunk: int = 512) -> np.ndarray:
        if len(sequences) == 0:
            return np.zeros((0, self.dim))
        parts = []
        for start in range(0, len(sequences), chunk):
            feats = np.stack([self.features(s) for s in sequences[start:start + chunk]])
            parts.append(feats @ self.projection.T)
        return np.concatenate(parts)

    def content_hash(self) -> str:
        return tensors_sha256({"projection": self.projection})


@dataclass
class GaussianStats:
    """嵌入集合的均值与无偏协方差"""
    mean: np.ndarray
    cov: np.ndarray
    n: int


def fit_gaussian(vectors) -> GaussianStats:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise MetricError(f"拟合高斯至少需要 2 个向量，当前形状 {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mean, 0.5 * (cov + cov.T), x.shape[0])


def frechet_distance(a: GaussianStats, b: GaussianStats, clamp_tol: float = 1e-8) -> float:
    """
    FD = ‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^{1/2} Σb Σa^{1/2})^{1/2})
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise MetricError(f"维度不一致: {a.cov.shape} 与 {b.cov.shape}")
    root_a = psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    cross = float(np.trace(psd_sqrt(0.5 * (inner + inner.T))))
    diff = a.mean - b.mean
    value = float(diff @ diff) + float(np.trace(a.cov)) + float(np.trace(b.cov)) - 2.0 * cross
    if value < 0:
        if value < -clamp_tol:
            raise MetricError(f"Fréchet 距离为明显负值 {value:.3e}")
        value = 0.0
    return value


# ---------------------------------------------------------------------------
# 小型网络的训练循环
# ---------------------------------------------------------------------------

def _fit(weights: Dict[str, np.ndarray], loss_fn: Callable[[Dict[str, Tensor], np.ndarray], Tensor],
         n: int, steps: int, batch_size: int, lr: float, rng: np.random.Generator,
         label: str) -> Dict[str, np.ndarray]:
    state = AdamState.zeros_like(weights)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        leaves = make_leaves(weights)
        loss = loss_fn(leaves, idx)
        weights, state = adam_step(weights, gradients(loss, leaves), state, lr)
        if (step + 1) % max(1, steps // 4) == 0:
            logger.debug(f"{label} 训练步 {step + 1}/{steps}: 损失 {loss.item():.4f}")
    return weights


def _he(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class _Standardizer:
    """训练集嵌入上的逐维标准化"""

    @staticmethod
    def fit(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-8)


# ---------------------------------------------------------------------------
# 风格分类器与 KL
# ---------------------------------------------------------------------------

@dataclass
class GenreClassifier:
    """嵌入 → 隐藏层 → 风格概率 的两层网络，训练后冻结"""
    embedder: FeatureEmbedder
    weights: Dict[str, np.ndarray]

    def freeze(self) -> "GenreClassifier":
        self.weights = {name: _readonly(arr) for name, arr in self.weights.items()}
        return self

    @property
    def n_genres(self) -> int:
        return self.weights["w2"].shape[1]

    def _logits(self, x: np.ndarray) -> np.ndarray:
        w = self.weights
        h = np.maximum((x - w["mean"]) / w["scale"] @ w["w1"] + w["b1"], 0.0)
        return h @ w["w2"] + w["b2"]

    def predict_proba(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        return softmax_array(self._logits(self.embedder.embed_many(sequences)))

    def content_hash(self) -> str:
        return tensors_sha256(self.weights)


def _classifier_loss(leaves: Dict[str, Tensor], x: np.ndarray, y: np.ndarray) -> Tensor:
    h = relu(matmul(Tensor(x), leaves["w1"]) + leaves["b1"])
    return cross_entropy(matmul(h, leaves["w2"]) + leaves["b2"], y)


def train_genre_classifier(embedder: FeatureEmbedder, examples: Sequence[PairedExample],
                           n_genres: int, cfg: MetricsConfig, seed: int) -> GenreClassifier:
    """在评估器语料上训练风格分类器，训练后冻结"""
    if len({ex.prompt.genre for ex in examples}) < 2:
        raise MetricError("分类器训练语料至少需要两个风格")
    rng = np.random.default_rng(seed)
    x = embedder.embed_many([ex.tokens for ex in examples])
    y = np.array([ex.prompt.genre for ex in examples], dtype=np.int64)
    mean, scale = _Standardizer.fit(x)
    z = (x - mean) / scale
    weights = {
        "w1": _he(rng, embedder.dim, cfg.classifier_hidden),
        "b1": np.zeros(cfg.classifier_hidden),
        "w2": _he(rng, cfg.classifier_hidden, n_genres),
        "b2": np.zeros(n_genres),
    }
    weights = _fit(weights, lambda leaves, idx: _classifier_loss(leaves, z[idx], y[idx]),
                   len(examples), cfg.classifier_steps, cfg.classifier_batch, cfg.classifier_lr,
                   rng, "分类器")
    weights.update(mean=mean, scale=scale)
    classifier = GenreClassifier(embedder, weights).freeze()
    logger.info(f"风格分类器训练完成 (hash={classifier.content_hash()[:12]})")
    return classifier


def classifier_accuracy(classifier: GenreClassifier, examples: Sequence[PairedExample]) -> float:
    probs = classifier.predict_proba([ex.tokens for ex in examples])
    labels = np.array([ex.prompt.genre for ex in examples])
    return float((probs.argmax(axis=1) == labels).mean())


def classifier_dist(classifier: GenreClassifier, tokens: Sequence[int]) -> np.ndarray:
    """单条序列的风格概率向量"""
    return classifier.predict_proba([tokens])[0]


def kl_divergence(p, q, q_floor: float = 1e-10, tol: float = 1e-8) -> float:
    """
    KL(p ‖ q) = Σ p_i ln(p_i / max(q_i, q_floor))，0·ln 0 = 0
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise MetricError(f"分布长度不一致: {p.shape} 与 {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if (dist < 0).any() or abs(dist.sum() - 1.0) > tol:
            raise MetricError(f"{name} 不是概率分布 (和为 {dist.sum():.10f})")
    support = p > 0
    floored = np.maximum(q, q_floor)
    value = float((p[support] * np.log(p[support] / floored[support])).sum())
    return max(value, 0.0)


def kl_from_distributions(reference: Mapping[Prompt, np.ndarray], generated: Mapping[Prompt, np.ndarray],
                          q_floor: float = 1e-10) -> float:
    """
    每个提示上 KL(参考平均分布 ‖ 生成平均分布)，再对提示取平均

    Args:
        reference: 提示 → (n_ref, G) 分类器输出
        generated: 提示 → (n_gen, G) 分类器输出
    """
    if not reference or set(reference) != set(generated):
        raise MetricError("参考与生成的提示集合不一致或为空")
    values = []
    for prompt in sorted(reference):
        ref, gen = np.asarray(reference[prompt]), np.asarray(generated[prompt])
        if len(ref) == 0 or len(gen) == 0:
            raise MetricError(f"提示 {prompt} 的参考或生成集合为空")
        values.append(kl_divergence(ref.mean(axis=0), gen.mean(axis=0), q_floor))
    return float(np.mean(values))


def kl_metric(classifier: GenreClassifier, generated: Mapping[Prompt, Sequence[Sequence[int]]],
              references: Mapping[Prompt, Sequence[Sequence[int]]], q_floor: float = 1e-10) -> float:
    if set(references) != set(generated):
        raise MetricError("参考与生成的提示集合不一致")
    return kl_from_distributions(
        {p: classifier.predict_proba(list(references[p])) for p in references},
        {p: classifier.predict_proba(list(generated[p])) for p in generated},
        q_floor,
    )


# ---------------------------------------------------------------------------
# 双塔编码器与 CLAP 对应物
# ---------------------------------------------------------------------------

@dataclass
class DualEncoder:
    """提示编码器与序列编码器，输出单位向量"""
    embedder: FeatureEmbedder
    n_genres: int
    weights: Dict[str, np.ndarray]

    def freeze(self) -> "DualEncoder":
        self.weights = {name: _readonly(arr) for name, arr in self.weights.items()}
        return self

    def content_hash(self) -> str:
        return tensors_sha256(self.weights)

    def encode_prompts(self, prompts: Sequence[Prompt]) -> np.ndarray:
        leaves = {name: Tensor(arr) for name, arr in self.weights.items()}
        return _encode_prompts(leaves, _prompt_id_arrays(prompts, self.n_genres)).data

    def encode_sequences(self, sequences: Sequence[Sequence[int]]) -> np.ndarray:
        leaves = {name: Tensor(arr) for name, arr in self.weights.items()}
        x = (self.embedder.embed_many(sequences) - self.weights["mean"]) / self.weights["scale"]
        return _encode_sequences(leaves, x).data


def _prompt_id_arrays(prompts: Sequence[Prompt], n_genres: int) -> Tuple[np.ndarray, np.ndarray]:
    ids = np.array([p.token_ids(n_genres) for p in prompts], dtype=np.int64).reshape(-1, 2)
    return ids[:, 0], ids[:, 1]


def _encode_prompts(leaves: Dict[str, Tensor], ids: Tuple[np.ndarray, np.ndarray]) -> Tensor:
    h = relu(embedding(leaves["prompt.emb"], ids[0]) + embedding(leaves["prompt.emb"], ids[1]))
    return l2_normalize(matmul(h, leaves["prompt.w"]) + leaves["prompt.b"])


def _encode_sequences(leaves: Dict[str, Tensor], x: np.ndarray) -> Tensor:
    h = relu(matmul(Tensor(x), leaves["seq.w1"]) + leaves["seq.b1"])
    return l2_normalize(matmul(h, leaves["seq.w2"]) + leaves["seq.b2"])


def train_dual_encoder(embedder: FeatureEmbedder, examples: Sequence[PairedExample], n_genres: int,
                       n_moods: int, cfg: MetricsConfig, seed: int) -> DualEncoder:
    """
    以批内负样本的对称 InfoNCE 训练双塔编码器；每个批次中的提示互不相同
    """
    by_prompt: Dict[Prompt, List[int]] = {}
    for i, ex in enumerate(examples):
        by_prompt.setdefault(ex.prompt, []).append(i)
    prompts = sorted(by_prompt)
    if len(prompts) < 2:
        raise MetricError("双塔编码器训练至少需要两个不同的提示")

    rng = np.random.default_rng(seed)
    x = embedder.embed_many([ex.tokens for ex in examples])
    mean, scale = _Standardizer.fit(x)
    z = (x - mean) / scale
    hidden, dim = cfg.encoder_hidden, cfg.clap_dim
    weights = {
        "prompt.emb": rng.normal(0.0, 1.0, size=(n_genres + n_moods, hidden)),
        "prompt.w": _he(rng, hidden, dim),
        "prompt.b": np.zeros(dim),
        "seq.w1": _he(rng, embedder.dim, hidden),
        "seq.b1": np.zeros(hidden),
        "seq.w2": _he(rng, hidden, dim),
        "seq.b2": np.zeros(dim),
    }
    inv_temperature = 1.0 / cfg.encoder_temperature

    def loss_fn(leaves: Dict[str, Tensor], prompt_idx: np.ndarray) -> Tensor:
        chosen = [prompts[i] for i in prompt_idx]
        rows = np.array([by_prompt[p][rng.integers(len(by_prompt[p]))] for p in chosen])
        p_vec = _encode_prompts(leaves, _prompt_id_arrays(chosen, n_genres))
        s_vec = _encode_sequences(leaves, z[rows])
        logits = mul(matmul(p_vec, transpose(s_vec, (1, 0))), inv_temperature)
        targets = np.arange(len(chosen))
        return mul(cross_entropy(logits, targets) + cross_entropy(transpose(logits, (1, 0)), targets), 0.5)

    weights = _fit(weights, loss_fn, len(prompts), cfg.encoder_steps, len(prompts),
                   cfg.encoder_lr, rng, "双塔编码器")
    weights.update(mean=mean, scale=scale)
    encoder = DualEncoder(embedder, n_genres, weights).freeze()
    logger.info(f"双塔编码器训练完成 (hash={encoder.content_hash()[:12]})")
    return encoder


def clap_score(encoder: DualEncoder, prompt: Prompt, tokens: Sequence[int]) -> float:
    """两个单位向量编码的余弦相似度"""
    p = encoder.encode_prompts([prompt])[0]
    s = encoder.encode_sequences([tokens])[0]
    return float(np.clip(p @ s, -1.0, 1.0))


def encoder_gates(encoder: DualEncoder, examples: Sequence[PairedExample],
                  candidates: Sequence[Prompt]) -> Tuple[float, float]:
    """
    留出数据上的 (匹配与不匹配余弦的差值, 提示检索准确率)
    """
    candidates = sorted(candidates)
    index = {p: i for i, p in enumerate(candidates)}
    sims = encoder.encode_sequences([ex.tokens for ex in examples]) @ encoder.encode_prompts(candidates).T
    truth = np.array([index[ex.prompt] for ex in examples])
    matched = sims[np.arange(len(examples)), truth]
    mismatch_mask = np.ones_like(sims, dtype=bool)
    mismatch_mask[np.arange(len(examples)), truth] = False
    margin = float(matched.mean() - sims[mismatch_mask].mean())
    retrieval = float((sims.argmax(axis=1) == truth).mean())
    return margin, retrieval


# ---------------------------------------------------------------------------
# 冻结评估器集合
# ---------------------------------------------------------------------------

@dataclass
class QualityGates:
    classifier_accuracy: float
    encoder_margin: float
    encoder_retrieval: float

    @property
    def classifier_passed(self) -> bool:
        return self.classifier_accuracy > CLASSIFIER_MIN_ACCURACY

    @property
    def encoder_passed(self) -> bool:
        return self.encoder_margin >= ENCODER_MIN_MARGIN and self.encoder_retrieval >= ENCODER_MIN_RETRIEVAL

    @property
    def passed(self) -> bool:
        return self.classifier_passed and self.encoder_passed

    def as_dict(self) -> Dict[str, Union[float, bool]]:
        return {
            "classifier_accuracy": self.classifier_accuracy,
            "classifier_passed": self.classifier_passed,
            "encoder_margin": self.encoder_margin,
            "encoder_retrieval": self.encoder_retrieval,
            "encoder_passed": self.encoder_passed,
        }


@dataclass
class OracleSet:
    """嵌入器、分类器、双塔编码器及训练时记录的哈希"""
    embedder: FeatureEmbedder
    classifier: GenreClassifier
    encoder: DualEncoder
    gates: QualityGates
    hashes: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.hashes:
            self.hashes = self.current_hashes()

    def current_hashes(self) -> Dict[str, str]:
        return {
            "embedder": self.embedder.content_hash(),
            "classifier": self.classifier.content_hash(),
            "encoder": self.encoder.content_hash(),
        }

    def verify(self):
        """冻结检查：当前权重哈希必须与记录一致"""
        current = self.current_hashes()
        for name, recorded in self.hashes.items():
            if current[name] != recorded:
                raise FrozenOracleError(f"{name} 权重哈希 {current[name][:12]} 与记录 {recorded[:12]} 不一致")

    def save(self, directory: Union[str, Path]) -> Dict[str, str]:
        """每个评估器一个张量包，返回 文件名 → sha256"""
        directory = Path(directory)
        self.verify()
        digests = {
            "embedder.bundle": write_bundle(
                directory / "embedder.bundle", "ttm-embedder",
                {"vocab_size": self.embedder.vocab_size, "content_hash": self.hashes["embedder"]},
                {"projection": self.embedder.projection}),
            "classifier.bundle": write_bundle(
                directory / "classifier.bundle", "ttm-classifier",
                {"content_hash": self.hashes["classifier"], **self.gates.as_dict()},
                self.classifier.weights),
            "encoder.bundle": write_bundle(
                directory / "encoder.bundle", "ttm-dual-encoder",
                {"n_genres": self.encoder.n_genres, "content_hash": self.hashes["encoder"]},
                self.encoder.weights),
        }
        logger.info(f"评估器已保存到 {directory}")
        return digests

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "OracleSet":
        directory = Path(directory)
        try:
            emb_header, emb_tensors = read_bundle(directory / "embedder.bundle", "ttm-embedder")
            cls_header, cls_tensors = read_bundle(directory / "classifier.bundle", "ttm-classifier")
            enc_header, enc_tensors = read_bundle(directory / "encoder.bundle", "ttm-dual-encoder")
        except (OSError, TensorBundleError) as e:
            raise MetricError(f"评估器加载失败: {e}") from e
        embedder = FeatureEmbedder(int(emb_header["vocab_size"]), _readonly(emb_tensors["projection"]))
        oracles = cls(
            embedder,
            GenreClassifier(embedder, cls_tensors).freeze(),
            DualEncoder(embedder, int(enc_header["n_genres"]), enc_tensors).freeze(),
            QualityGates(float(cls_header["classifier_accuracy"]), float(cls_header["encoder_margin"]),
                         float(cls_header["encoder_retrieval"])),
            {"embedder": emb_header["content_hash"], "classifier": cls_header["content_hash"],
             "encoder": enc_header["content_hash"]},
        )
        oracles.verify()
        return oracles


def build_oracles(training: Sequence[PairedExample], held_out: Sequence[PairedExample],
                  splits: DatasetSplits, cfg: MetricsConfig, seeds: Mapping[str, int]) -> OracleSet:
    """
    训练并冻结全部评估器，在留出语料上计算质量门限

    Args:
        seeds: 需要 embedder / classifier / dual-encoder 三个种子
    """
    world = splits.world
    embedder = FeatureEmbedder.create(world.vocab_size, cfg.embed_dim, seeds["embedder"])
    classifier = train_genre_classifier(embedder, training, world.n_genres, cfg, seeds["classifier"])
    encoder = train_dual_encoder(embedder, training, world.n_genres, world.n_moods, cfg, seeds["dual-encoder"])
    margin, retrieval = encoder_gates(encoder, held_out, world.prompts())
    gates = QualityGates(classifier_accuracy(classifier, held_out), margin, retrieval)
    logger.info(f"质量门限: 分类器准确率 {gates.classifier_accuracy:.3f}, "
                f"编码器余弦差 {gates.encoder_margin:.3f}, 检索准确率 {gates.encoder_retrieval:.3f}")
    if not gates.passed:
        logger.warning("评估器质量门限未通过，相关指标仅供参考")
    return OracleSet(embedder, classifier, encoder, gates)


# ---------------------------------------------------------------------------
# 模型评估
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """一个 (模型, 划分) 的评估结果"""
    model: str
    split: str
    fad: float
    kl: float
    clap: float
    n_prompts: int
    n_gen: int
    q_floor: float
    seed: int
    embedder_hash: str
    classifier_hash: str
    encoder_hash: str

    def validate(self):
        if self.split not in SPLITS:
            raise MetricError(f"未知的划分 {self.split!r}")
        if not (self.fad >= 0 and self.kl >= 0 and -1.0 <= self.clap <= 1.0):
            raise MetricError(f"{self.model}/{self.split}: 指标超出取值范围 "
                              f"(fad={self.fad}, kl={self.kl}, clap={self.clap})")


def evaluate_generated(model: str, split: str, generated: Mapping[Prompt, Sequence[Sequence[int]]],
                       references: Mapping[Prompt, Sequence[Sequence[int]]], oracles: OracleSet,
                       q_floor: float, seed: int) -> MetricReport:
    """在已有的生成结果上计算 FAD/KL/CLAP"""
    prompts = sorted(references)
    if not prompts:
        raise MetricError(f"{split} 划分缺少参考池")
    missing = [p for p in prompts if not generated.get(p)]
    if missing:
        raise MetricError(f"提示 {missing[0]} 没有生成结果")
    oracles.verify()

    gen_seqs = [seq for p in prompts for seq in generated[p]]
    ref_seqs = [seq for p in prompts for seq in references[p]]
    fad = frechet_distance(fit_gaussian(oracles.embedder.embed_many(ref_seqs)),
                           fit_gaussian(oracles.embedder.embed_many(gen_seqs)))
    kl = kl_metric(oracles.classifier, {p: generated[p] for p in prompts}, references, q_floor)
    clap = float(np.mean([
        float(np.clip(row, -1.0, 1.0))
        for p in prompts
        for row in oracles.encoder.encode_sequences(list(generated[p])) @ oracles.encoder.encode_prompts([p])[0]
    ]))
    oracles.verify()

    report = MetricReport(model, split, fad, kl, clap, len(prompts),
                          max(len(generated[p]) for p in prompts), q_floor, seed,
                          oracles.hashes["embedder"], oracles.hashes["classifier"], oracles.hashes["encoder"])
    report.validate()
    return report


def evaluate_model(params: ModelParams, splits: DatasetSplits, oracles: OracleSet, sampler: SamplerConfig,
                   n_gen: int, q_floor: float, model: str = "Original") -> List[MetricReport]:
    """
    为每个划分的每个提示生成 n_gen 条序列并评估；
    不同模型使用相同的提示集合与相同的随机流

    未见遗忘集为空时跳过该划分

    Returns:
        按 forget、remain、unseen 顺序排列的报告
    """
    reports = []
    for split_index, split in enumerate(SPLITS):
        references = {p: [ex.tokens for ex in pool]
                      for p, pool in splits.reference_pools.get(split, {}).items()}
        prompts = sorted(references)
        if not prompts and split not in REQUIRED_SPLITS:
            continue
        if not prompts:
            raise MetricError(f"{split} 划分缺少参考池")
        rng = np.random.default_rng([sampler.seed, split_index])
        batch = [p for p in prompts for _ in range(n_gen)]
        sequences = generate_batch(params, batch, sampler, rng)
        generated = {p: [tuple(int(t) for t in sequences[i * n_gen + j]) for j in range(n_gen)]
                     for i, p in enumerate(prompts)}
        report = evaluate_generated(model, split, generated, references, oracles, q_floor, sampler.seed)
        logger.info(f"{model}/{split}: FAD={report.fad:.3f}, KL={report.kl:.3f}, CLAP={report.clap:.3f}")
        reports.append(report)
    return reports


class MetricEvaluator:
    """评估 Agent：持有冻结评估器与采样设置"""

    def __init__(self, oracles: OracleSet, sampler: SamplerConfig, metrics_config: MetricsConfig):
        self.oracles = oracles
        self.sampler = sampler
        self.metrics_config = metrics_config

    def evaluate(self, params: ModelParams, splits: DatasetSplits, model: str) -> List[MetricReport]:
        return evaluate_model(params, splits, self.oracles, self.sampler,
                              self.metrics_config.n_gen, self.metrics_config.q_floor, model)
