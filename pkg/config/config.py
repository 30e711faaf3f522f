"""
配置管理模块
管理合成世界、数据划分、模型、训练、遗忘、评估与输出等全部实验配置
"""

import copy
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

logger = logging.getLogger(__name__)

UNLEARN_METHODS = ("ga", "rl")
RELABEL_POLICIES = ("fixed-per-sample", "resample-each-epoch", "shuffle")
FORGET_SELECTIONS = ("genre", "random")


class ConfigError(ValueError):
    """配置校验失败"""


@dataclass
class WorldConfig:
    """合成音乐 token 世界配置"""
    vocab_size: int = 64           # 音乐词表大小 V_m
    n_genres: int = 8              # 风格 token 数 G
    n_moods: int = 4               # 情绪 token 数 M
    seq_len: int = 32              # 序列长度 L
    motif_len: int = 7             # 每个风格的循环动机长度
    motif_weight: float = 0.7      # 转移到动机后继的概率质量
    sparse_weight: float = 0.25    # 风格相关稀疏噪声的概率质量，剩余质量均匀分布
    sparse_support: int = 3        # 每行稀疏噪声的支撑大小
    min_tv_distance: float = 0.05  # 任意两个 (风格, 情绪) 转移矩阵的最小平均行 TV 距离
    max_rejections: int = 50       # 拒绝采样上限


@dataclass
class SplitConfig:
    """训练/遗忘/保留集划分配置"""
    n_train: int = 4096
    n_forget: int = 64
    n_remain: int = 512
    n_unseen: int = 64                # 未见遗忘集：遗忘提示下从未训练过的样本，只用于评估；0 表示不生成
    remain_shift: float = 0.3
    forget_genre: int = 0
    forget_selection: str = "genre"   # genre: 集中在遗忘风格；random: 随机训练样本
    ref_per_prompt: int = 16          # 每个提示的参考池大小，至少 8
    oracle_per_prompt: int = 48       # 评估器语料中每个提示、每个过程的样本数
    oracle_holdout: float = 0.25      # 评估器语料的留出比例
    max_resample: int = 100           # 保留集/未见遗忘集样本与训练集重复时的重抽上限


@dataclass
class ModelConfig:
    """条件自回归 Transformer 配置"""
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    music_vocab: int = 64
    n_genres: int = 8
    n_moods: int = 4
    seq_len: int = 32
    prompt_len: int = 2
    init_std: float = 0.02
    init_seed: int = 0

    @property
    def prompt_vocab(self) -> int:
        return self.n_genres + self.n_moods

    @property
    def joint_vocab(self) -> int:
        return self.music_vocab + self.prompt_vocab

    @property
    def context_len(self) -> int:
        return self.prompt_len + self.seq_len

    def validate(self):
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) 必须能被 n_heads ({self.n_heads}) 整除")
        if self.n_layers < 1 or self.d_ff < 1:
            raise ConfigError("n_layers 与 d_ff 必须为正")
        if self.music_vocab < 1 or self.n_genres < 1 or self.n_moods < 1 or self.seq_len < 1:
            raise ConfigError("词表大小与序列长度必须为正")
        if self.prompt_len != 2:
            raise ConfigError("提示长度固定为 2（风格、情绪）")
        if self.context_len < self.prompt_len + 1:
            raise ConfigError("上下文长度至少为提示长度 + 1")


@dataclass
class TrainSchedule:
    """基础模型训练日程"""
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    seed: int = 0
    log_every: int = 200


@dataclass
class SamplerConfig:
    """采样配置"""
    temperature: float = 1.0
    top_k: int = 0       # 0 表示不截断
    seed: int = 0

    def validate(self, vocab_size: int):
        if not self.temperature > 0:
            raise ConfigError(f"temperature 必须大于 0，当前为 {self.temperature}")
        if self.top_k != 0 and not 1 <= self.top_k <= vocab_size:
            raise ConfigError(f"top_k 必须为 0 或位于 [1, {vocab_size}]")


@dataclass
class UnlearnConfig:
    """遗忘配置（GA: 梯度上升；RL: 随机标注）"""
    method: str = "ga"
    max_steps: int = 1000          # 0 表示不更新，返回与 θ 逐位相同的参数
    lr: float = 1e-4
    batch_size: int = 32
    explode_threshold: Optional[float] = None   # None 表示 3·ln V_m
    relabel_policy: str = "fixed-per-sample"
    seed: int = 0
    log_every: int = 50

    def resolved_threshold(self, vocab_size: int) -> float:
        if self.explode_threshold is None:
            return 3.0 * math.log(vocab_size)
        return float(self.explode_threshold)

    def validate(self, vocab_size: int):
        if self.method.lower() not in UNLEARN_METHODS:
            raise ConfigError(f"未知的遗忘方法 {self.method!r}，可选: {', '.join(UNLEARN_METHODS)}")
        if self.max_steps < 0:
            raise ConfigError("max_steps 不能为负")
        if not self.lr > 0:
            raise ConfigError(f"遗忘学习率必须大于 0，当前为 {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size 必须为正")
        if vocab_size > 1 and not self.resolved_threshold(vocab_size) > math.log(vocab_size):
            raise ConfigError("爆炸阈值必须大于 ln V_m")
        if self.relabel_policy not in RELABEL_POLICIES:
            raise ConfigError(f"未知的重标注策略 {self.relabel_policy!r}，可选: {', '.join(RELABEL_POLICIES)}")


@dataclass
class MetricsConfig:
    """评估指标配置"""
    n_gen: int = 8                 # 每个提示生成的序列数
    embed_dim: int = 32            # 特征嵌入维度 d_e
    clap_dim: int = 16             # 双塔编码维度 d_c
    q_floor: float = 1e-10         # KL 中 q 的下限
    classifier_hidden: int = 64
    classifier_steps: int = 600
    classifier_lr: float = 3e-3
    classifier_batch: int = 128
    encoder_hidden: int = 64
    encoder_steps: int = 800
    encoder_lr: float = 3e-3
    encoder_temperature: float = 0.1
    enforce_quality_gates: bool = False


@dataclass
class OutputConfig:
    """输出配置"""
    output_dir: str = "runs/default"


@dataclass
class LoggingConfig:
    """日志配置"""
    level: str = "info"
    log_dir: str = "logs"


SECTIONS = ("world", "splits", "model", "train", "sampler", "unlearn_ga", "unlearn_rl",
            "metrics", "output", "logging")


@dataclass
class ExperimentConfig:
    """主配置类"""
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    unlearn_ga: UnlearnConfig = field(default_factory=lambda: UnlearnConfig(method="ga", max_steps=1000))
    unlearn_rl: UnlearnConfig = field(default_factory=lambda: UnlearnConfig(method="rl", max_steps=200))
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def derive_seed(self, tag: str) -> int:
        return derive_seed(self.seed, tag)

    def unlearn_config(self, method: str) -> UnlearnConfig:
        method = method.lower()
        if method not in UNLEARN_METHODS:
            raise ConfigError(f"未知的遗忘方法 {method!r}，可选: {', '.join(UNLEARN_METHODS)}")
        return self.unlearn_ga if method == "ga" else self.unlearn_rl

    def resolved(self) -> "ExperimentConfig":
        """
        返回同步后的副本：模型词表与世界一致，各阶段种子由主种子派生
        """
        cfg = copy.deepcopy(self)
        cfg.model.music_vocab = cfg.world.vocab_size
        cfg.model.n_genres = cfg.world.n_genres
        cfg.model.n_moods = cfg.world.n_moods
        cfg.model.seq_len = cfg.world.seq_len
        cfg.model.init_seed = cfg.derive_seed("init")
        cfg.train.seed = cfg.derive_seed("train")
        cfg.sampler.seed = cfg.derive_seed("evaluate")
        cfg.unlearn_ga.seed = cfg.derive_seed("unlearn-ga")
        cfg.unlearn_rl.seed = cfg.derive_seed("unlearn-rl")
        cfg.unlearn_ga.method = "ga"
        cfg.unlearn_rl.method = "rl"
        return cfg

    def validate(self) -> bool:
        """在任何阶段运行前校验全部子配置"""
        w = self.world
        if w.vocab_size < 8 or w.n_genres < 2 or w.n_moods < 1 or w.seq_len < 4:
            raise ConfigError("世界配置要求 vocab_size ≥ 8, n_genres ≥ 2, n_moods ≥ 1, seq_len ≥ 4")
        if not 0 < w.motif_len <= w.vocab_size:
            raise ConfigError("motif_len 必须位于 [1, vocab_size]")
        if w.motif_weight < 0 or w.sparse_weight < 0 or w.motif_weight + w.sparse_weight > 1:
            raise ConfigError("motif_weight + sparse_weight 必须位于 [0, 1]")
        if not 0 < w.sparse_support <= w.vocab_size:
            raise ConfigError("sparse_support 必须位于 [1, vocab_size]")
        s = self.splits
        if not 0 < s.n_forget <= s.n_train:
            raise ConfigError(f"要求 0 < n_forget ≤ n_train，当前 n_forget={s.n_forget}, n_train={s.n_train}")
        if s.n_remain < 1:
            raise ConfigError("保留集不能为空")
        if s.n_unseen < 0:
            raise ConfigError("n_unseen 不能为负")
        if s.max_resample < 1:
            raise ConfigError("max_resample 至少为 1")
        if not 0.0 <= s.remain_shift <= 1.0:
            raise ConfigError("remain_shift 必须位于 [0, 1]")
        if not 0 <= s.forget_genre < w.n_genres:
            raise ConfigError(f"forget_genre 必须位于 [0, {w.n_genres})")
        if s.forget_selection not in FORGET_SELECTIONS:
            raise ConfigError(f"未知的遗忘集选择方式 {s.forget_selection!r}，可选: {', '.join(FORGET_SELECTIONS)}")
        if s.ref_per_prompt < 8:
            raise ConfigError("ref_per_prompt 至少为 8")
        if s.oracle_per_prompt < 4 or not 0 < s.oracle_holdout < 1:
            raise ConfigError("评估器语料配置无效")
        resolved = self.resolved()
        resolved.model.validate()
        if self.train.steps < 0 or self.train.batch_size < 1 or not self.train.lr > 0:
            raise ConfigError("训练日程无效")
        self.sampler.validate(w.vocab_size)
        self.unlearn_ga.validate(w.vocab_size)
        self.unlearn_rl.validate(w.vocab_size)
        if self.unlearn_ga.method.lower() != "ga" or self.unlearn_rl.method.lower() != "rl":
            raise ConfigError("unlearn_ga / unlearn_rl 的 method 字段必须分别为 ga / rl")
        m = self.metrics
        if m.n_gen < 1 or m.embed_dim < 1 or m.clap_dim < 1 or not m.q_floor > 0:
            raise ConfigError("评估指标配置无效")
        if self.logging.level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ConfigError(f"未知的日志级别 {self.logging.level!r}")
        return True

    def to_flat_dict(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {"seed": self.seed}
        for section in SECTIONS:
            for f in fields(getattr(self, section)):
                flat[f"{section}.{f.name}"] = getattr(getattr(self, section), f.name)
        return flat

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_flat_dict(), sort_keys=True, allow_unicode=True)

    def config_hash(self) -> str:
        """实验语义配置的哈希，不含输出目录与日志设置"""
        semantic = {k: v for k, v in self.to_flat_dict().items()
                    if not k.startswith(("output.", "logging."))}
        text = yaml.safe_dump(semantic, sort_keys=True, allow_unicode=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seed(master: int, tag: str) -> int:
    """子种子 = sha256("master:tag") 的前 8 字节"""
    digest = hashlib.sha256(f"{master}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def _flatten(mapping: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in mapping.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, path + "."))
        else:
            flat[path] = value
    return flat


def _coerce(key: str, current: Any, value: Any, optional_float: bool) -> Any:
    if value is None:
        if optional_float:
            return None
        raise ConfigError(f"{key} 不能为空")
    if optional_float or isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} 需要数值，实际为 {value!r}")
        return float(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} 需要布尔值，实际为 {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} 需要整数，实际为 {value!r}")
        return value
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} 需要字符串，实际为 {value!r}")
        return value
    raise ConfigError(f"{key} 的类型不受支持")


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """
    按扁平键路径覆盖配置

    Args:
        cfg: 基础配置（不会被修改）
        overrides: 形如 {"unlearn_ga.max_steps": 10} 的覆盖项，也接受嵌套字典
    """
    result = copy.deepcopy(cfg)
    for key, value in _flatten(overrides).items():
        if key == "seed":
            result.seed = _coerce(key, result.seed, value, False)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"未知的配置项: {key}")
        target = getattr(result, section)
        if not is_dataclass(target) or name not in {f.name for f in fields(target)}:
            raise ConfigError(f"未知的配置项: {key}")
        optional_float = section.startswith("unlearn_") and name == "explode_threshold"
        setattr(target, name, _coerce(key, getattr(target, name), value, optional_float))
    return result


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    加载配置
    优先级：覆盖项（命令行） > YAML 文件 > 数据类默认值；
    环境变量 TTM_LOG_LEVEL 覆盖日志级别
    """
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"配置文件不存在: {path}")
        try:
            document = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"配置文件解析失败: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError("配置文件顶层必须是映射")
        cfg = apply_overrides(cfg, document)
    env_level = os.getenv("TTM_LOG_LEVEL")
    if env_level:
        cfg.logging.level = env_level.lower()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    logger.debug(f"配置加载完成，config_hash={cfg.config_hash()[:12]}")
    return cfg


# 全局默认配置实例
config = ExperimentConfig()
