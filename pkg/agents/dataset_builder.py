"""
数据集构建 Agent
生成合成的 (提示, 音乐 token 序列) 世界，划分训练/遗忘/保留集与参考池，并负责持久化
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.config import FORGET_SELECTIONS, SplitConfig, WorldConfig, config

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SPLIT_TAGS = ("train", "forget", "remain", "unseen", "ref")
POOLS = ("forget", "remain", "unseen")

# 计数器式随机流的角色标签
_STREAM_WORLD = 0
_STREAM_TRAIN = 1
_STREAM_FORGET = 2
_STREAM_SHIFT = 3
_STREAM_REMAIN = 4
_STREAM_REF = 5
_STREAM_ORACLE = 6
_STREAM_UNSEEN = 7


class DatasetError(Exception):
    """数据集错误基类"""


class WorldBuildError(DatasetError):
    """世界构建失败（拒绝采样超限等）"""


class SplitError(DatasetError):
    """数据划分参数或不变量错误"""


class DatasetFormatError(DatasetError):
    """数据集文件格式错误"""


@dataclass(frozen=True, order=True)
class Prompt:
    """两 token 提示：(风格, 情绪)"""
    genre: int
    mood: int

    def token_ids(self, n_genres: int) -> Tuple[int, int]:
        """提示词表中的 token 编号：风格在前，情绪偏移 n_genres"""
        return self.genre, n_genres + self.mood

    @classmethod
    def from_token_ids(cls, ids: Sequence[int], n_genres: int, n_moods: int) -> "Prompt":
        if len(ids) != 2:
            raise DatasetFormatError(f"提示长度必须为 2，实际为 {len(ids)}")
        genre, mood_token = int(ids[0]), int(ids[1])
        if not 0 <= genre < n_genres or not n_genres <= mood_token < n_genres + n_moods:
            raise DatasetFormatError(f"提示 token {list(ids)} 超出提示词表")
        return cls(genre, mood_token - n_genres)


@dataclass(frozen=True)
class PairedExample:
    """一个 (提示 x, 音乐序列 y) 对"""
    prompt: Prompt
    tokens: Tuple[int, ...]

    def content_hash(self) -> str:
        payload = f"{self.prompt.genre},{self.prompt.mood}|{','.join(map(str, self.tokens))}"
        return hashlib.sha256(payload.encode("ascii")).hexdigest()


@dataclass
class WorldSpec:
    """合成世界：每个 (风格, 情绪) 的一阶转移矩阵与每个风格的初始分布"""
    vocab_size: int
    n_genres: int
    n_moods: int
    seq_len: int
    seed: int
    transitions: np.ndarray   # (G, M, V, V)
    initial: np.ndarray       # (G, V)

    @property
    def prompt_vocab(self) -> int:
        return self.n_genres + self.n_moods

    def prompts(self) -> List[Prompt]:
        return [Prompt(g, m) for g in range(self.n_genres) for m in range(self.n_moods)]

    def check_prompt(self, genre: int, mood: int):
        if not 0 <= genre < self.n_genres or not 0 <= mood < self.n_moods:
            raise DatasetError(f"无效的提示 (genre={genre}, mood={mood})")

    def validate(self):
        expected = (self.n_genres, self.n_moods, self.vocab_size, self.vocab_size)
        if self.transitions.shape != expected or self.initial.shape != (self.n_genres, self.vocab_size):
            raise DatasetError(f"转移矩阵形状 {self.transitions.shape} 与世界尺寸不一致")
        for name, arr in (("transitions", self.transitions), ("initial", self.initial)):
            if (arr < 0).any() or not np.isfinite(arr).all():
                raise DatasetError(f"{name} 含有负值或非有限值")
            if np.abs(arr.sum(axis=-1) - 1.0).max() > 1e-12:
                raise DatasetError(f"{name} 的行和不为 1")


@dataclass
class DatasetSplits:
    """训练集、遗忘集（训练集下标）、保留集、未见遗忘集与参考池"""
    world: WorldSpec
    train: List[PairedExample]
    forget_indices: List[int]
    remain: List[PairedExample]
    remain_transitions: np.ndarray
    remain_shift: float
    reference_pools: Dict[str, Dict[Prompt, List[PairedExample]]] = field(default_factory=dict)
    unseen: List[PairedExample] = field(default_factory=list)

    @property
    def forget(self) -> List[PairedExample]:
        return [self.train[i] for i in self.forget_indices]

    def split_examples(self, split: str) -> List[PairedExample]:
        if split == "forget":
            return self.forget
        if split == "remain":
            return self.remain
        if split == "unseen":
            return self.unseen
        raise SplitError(f"未知的划分 {split!r}")

    def split_prompts(self, split: str) -> List[Prompt]:
        return sorted({ex.prompt for ex in self.split_examples(split)})

    def validate(self):
        """检查 F ⊆ train、R ∩ train = ∅、U ∩ train = ∅、参考池大小等不变量"""
        if not self.forget_indices:
            raise SplitError("遗忘集为空")
        if len(set(self.forget_indices)) != len(self.forget_indices):
            raise SplitError("遗忘集下标重复")
        if any(not 0 <= i < len(self.train) for i in self.forget_indices):
            raise SplitError("遗忘集下标超出训练集范围")
        if not self.remain:
            raise SplitError("保留集为空")
        train_hashes = {ex.content_hash() for ex in self.train}
        overlap = sum(ex.content_hash() in train_hashes for ex in self.remain)
        if overlap:
            raise SplitError(f"保留集与训练集存在 {overlap} 个重复样本")
        overlap = sum(ex.content_hash() in train_hashes for ex in self.unseen)
        if overlap:
            raise SplitError(f"未见遗忘集与训练集存在 {overlap} 个重复样本")
        for pool_name in POOLS:
            pool = self.reference_pools.get(pool_name, {})
            for prompt in self.split_prompts(pool_name):
                if len(pool.get(prompt, [])) < 8:
                    raise SplitError(f"{pool_name} 参考池中提示 {prompt} 的样本少于 8 个")


# ---------------------------------------------------------------------------
# 世界构建与采样
# ---------------------------------------------------------------------------

def _mean_row_tv(a: np.ndarray, b: np.ndarray) -> float:
    """两个行随机矩阵之间的平均行总变差距离"""
    return float(0.5 * np.abs(a - b).sum(axis=-1).mean())


def mean_row_tv(a: np.ndarray, b: np.ndarray) -> float:
    return _mean_row_tv(a, b)


def _min_pairwise_tv(transitions: np.ndarray) -> float:
    flat = transitions.reshape(-1, *transitions.shape[-2:])
    best = np.inf
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            best = min(best, _mean_row_tv(flat[i], flat[j]))
    return float(best)


def _sample_world(rng: np.random.Generator, cfg: WorldConfig, seed: int) -> WorldSpec:
    V, G, M = cfg.vocab_size, cfg.n_genres, cfg.n_moods
    K = min(cfg.motif_len, V)
    uniform_weight = 1.0 - cfg.motif_weight - cfg.sparse_weight
    transitions = np.empty((G, M, V, V))
    initial = np.empty((G, V))
    rows = np.arange(V)

    for g in range(G):
        motif = rng.choice(V, size=K, replace=False)
        position = np.full(V, -1)
        position[motif] = np.arange(K)
        in_motif = position >= 0

        sparse = np.zeros((V, V))
        for t in range(V):
            support = rng.choice(V, size=cfg.sparse_support, replace=False)
            sparse[t, support] = rng.dirichlet(np.ones(cfg.sparse_support))

        init = np.full(V, 0.2 / V)
        init[motif] += 0.8 / K
        initial[g] = init / init.sum()

        for m in range(M):
            # 情绪决定动机内的步长与动机外 token 的回归入口
            stride = 1 + m
            successor = np.full(V, motif[m % K])
            successor[in_motif] = motif[(position[in_motif] + stride) % K]
            matrix = cfg.sparse_weight * sparse + uniform_weight / V
            matrix[rows, successor] += cfg.motif_weight
            transitions[g, m] = matrix / matrix.sum(axis=1, keepdims=True)

    return WorldSpec(V, G, M, cfg.seq_len, seed, transitions, initial)


def build_world(seed: int, world_config: Optional[WorldConfig] = None) -> WorldSpec:
    """
    构建合成世界：每个风格偏好一个不同的循环动机，情绪改变动机步长；
    对 (风格, 情绪) 间距离过小的候选进行拒绝采样

    Args:
        seed: 世界种子
        world_config: 词表与尺寸配置

    Returns:
        WorldSpec
    """
    cfg = world_config or config.world
    if cfg.vocab_size < 8 or cfg.n_genres < 2 or cfg.n_moods < 1 or cfg.seq_len < 4:
        raise WorldBuildError("要求 vocab_size ≥ 8, n_genres ≥ 2, n_moods ≥ 1, seq_len ≥ 4")

    for attempt in range(cfg.max_rejections):
        rng = np.random.default_rng([seed, _STREAM_WORLD, attempt])
        world = _sample_world(rng, cfg, seed)
        distance = _min_pairwise_tv(world.transitions)
        if distance >= cfg.min_tv_distance:
            world.validate()
            logger.info(f"世界构建完成: V={cfg.vocab_size}, G={cfg.n_genres}, M={cfg.n_moods}, "
                        f"最小 TV={distance:.3f}, 尝试次数={attempt + 1}")
            return world
        logger.debug(f"第 {attempt + 1} 次候选最小 TV={distance:.4f}，拒绝")
    raise WorldBuildError(f"{cfg.max_rejections} 次拒绝采样后仍无法满足最小 TV 距离 {cfg.min_tv_distance}")


def _sample_chain(transitions: np.ndarray, initial: np.ndarray, length: int,
                  rng: np.random.Generator) -> Tuple[int, ...]:
    vocab = initial.shape[0]
    uniforms = rng.random(length)
    tokens = np.empty(length, dtype=np.int64)
    tokens[0] = min(int(np.searchsorted(np.cumsum(initial), uniforms[0], side="right")), vocab - 1)
    cdf = np.cumsum(transitions, axis=1)
    for t in range(1, length):
        tokens[t] = min(int(np.searchsorted(cdf[tokens[t - 1]], uniforms[t], side="right")), vocab - 1)
    return tuple(int(x) for x in tokens)


def sample_pair(world: WorldSpec, genre: int, mood: int, rng: np.random.Generator,
                transitions: Optional[np.ndarray] = None) -> PairedExample:
    """
    从 (风格, 情绪) 的马尔可夫链采样一个样本

    Args:
        transitions: 可选的替代转移张量 (G, M, V, V)，保留集使用扰动后的矩阵
    """
    world.check_prompt(genre, mood)
    source = world.transitions if transitions is None else transitions
    tokens = _sample_chain(source[genre, mood], world.initial[genre], world.seq_len, rng)
    return PairedExample(Prompt(genre, mood), tokens)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _random_prompt(world: WorldSpec, rng: np.random.Generator) -> Tuple[int, int]:
    return int(rng.integers(world.n_genres)), int(rng.integers(world.n_moods))


def shift_transitions(world: WorldSpec, remain_shift: float, seed: int) -> np.ndarray:
    """保留集的生成矩阵：与新随机矩阵做凸组合"""
    if remain_shift == 0:
        return world.transitions.copy()
    rng = _stream(seed, _STREAM_SHIFT)
    noise = rng.dirichlet(np.ones(world.vocab_size), size=world.transitions.shape[:-1])
    mixed = (1.0 - remain_shift) * world.transitions + remain_shift * noise
    return mixed / mixed.sum(axis=-1, keepdims=True)


def _select_forget(world: WorldSpec, train: List[PairedExample], n_forget: int, seed: int,
                   forget_genre: int, selection: str) -> List[int]:
    rng = _stream(seed, _STREAM_FORGET)
    if selection == "random":
        return sorted(int(i) for i in rng.choice(len(train), size=n_forget, replace=False))

    candidates = [i for i, ex in enumerate(train) if ex.prompt.genre == forget_genre]
    if len(candidates) >= n_forget:
        return sorted(int(i) for i in rng.choice(candidates, size=n_forget, replace=False))

    logger.warning(f"遗忘风格 {forget_genre} 只有 {len(candidates)} 个训练样本，"
                   f"不足 {n_forget} 个，使用随机训练样本补齐")
    chosen = set(candidates)
    others = [i for i in range(len(train)) if i not in chosen]
    extra = rng.choice(others, size=n_forget - len(candidates), replace=False)
    return sorted(int(i) for i in list(candidates) + list(extra))


def _draw_outside_train(count: int, stream: int, seed: int, train_hashes: set,
                        draw: Callable[[np.random.Generator], PairedExample],
                        max_resample: int, label: str) -> List[PairedExample]:
    """逐个抽取与训练集内容不重复的样本，每个样本最多重抽 max_resample 次"""
    examples = []
    for i in range(count):
        for attempt in range(max_resample):
            example = draw(_stream(seed, stream, i, attempt))
            if example.content_hash() not in train_hashes:
                break
        else:
            raise SplitError(f"{label}第 {i} 个样本重抽 {max_resample} 次后仍与训练集重复，"
                             f"只得到 {len(examples)}/{count} 个样本")
        examples.append(example)
    return examples


def make_splits(world: WorldSpec, n_train: int, n_forget: int, n_remain: int,
                remain_shift: float, seed: int, forget_genre: int = 0,
                forget_selection: str = "genre", ref_per_prompt: int = 16,
                n_unseen: int = 0, max_resample: int = 100) -> DatasetSplits:
    """
    生成训练集、遗忘集、保留集、未见遗忘集与参考池

    Args:
        world: 合成世界
        n_train: 训练集大小
        n_forget: 遗忘集大小（训练集子集）
        n_remain: 保留集大小（与训练集不相交）
        remain_shift: 保留集分布偏移强度，位于 [0, 1]
        seed: 划分种子
        forget_genre: 遗忘风格
        forget_selection: genre 或 random
        ref_per_prompt: 每个提示的参考池样本数
        n_unseen: 未见遗忘集大小：遗忘集提示下、原始过程中、不在训练集里的样本
        max_resample: 保留集与未见遗忘集每个样本的重抽上限

    Returns:
        DatasetSplits

    Raises:
        SplitError: 参数无效，或重抽上限内无法得到与训练集不重复的样本
    """
    if not 0 < n_forget <= n_train:
        raise SplitError(f"要求 0 < n_forget ≤ n_train，当前 n_forget={n_forget}, n_train={n_train}")
    if n_remain < 1:
        raise SplitError("保留集不能为空")
    if not 0.0 <= remain_shift <= 1.0:
        raise SplitError(f"remain_shift 必须位于 [0, 1]，当前为 {remain_shift}")
    if forget_selection not in FORGET_SELECTIONS:
        raise SplitError(f"未知的遗忘集选择方式 {forget_selection!r}")
    if forget_selection == "genre" and not 0 <= forget_genre < world.n_genres:
        raise SplitError(f"forget_genre={forget_genre} 超出风格范围")
    if ref_per_prompt < 8:
        raise SplitError("ref_per_prompt 至少为 8")
    if n_unseen < 0:
        raise SplitError("n_unseen 不能为负")
    if max_resample < 1:
        raise SplitError("max_resample 至少为 1")

    logger.info(f"开始生成数据划分: n_train={n_train}, n_forget={n_forget}, "
                f"n_remain={n_remain}, n_unseen={n_unseen}, remain_shift={remain_shift}")

    train = []
    for i in range(n_train):
        rng = _stream(seed, _STREAM_TRAIN, i)
        genre, mood = _random_prompt(world, rng)
        train.append(sample_pair(world, genre, mood, rng))

    forget_indices = _select_forget(world, train, n_forget, seed, forget_genre, forget_selection)
    remain_transitions = shift_transitions(world, remain_shift, seed)

    train_hashes = {ex.content_hash() for ex in train}

    def draw_remain(rng: np.random.Generator) -> PairedExample:
        genre, mood = _random_prompt(world, rng)
        return sample_pair(world, genre, mood, rng, remain_transitions)

    remain = _draw_outside_train(n_remain, _STREAM_REMAIN, seed, train_hashes, draw_remain,
                                 max_resample, "保留集")

    forget_prompts = sorted({train[i].prompt for i in forget_indices})

    def draw_unseen(rng: np.random.Generator) -> PairedExample:
        prompt = forget_prompts[int(rng.integers(len(forget_prompts)))]
        return sample_pair(world, prompt.genre, prompt.mood, rng)

    unseen = _draw_outside_train(n_unseen, _STREAM_UNSEEN, seed, train_hashes, draw_unseen,
                                 max_resample, "未见遗忘集")

    splits = DatasetSplits(world, train, forget_indices, remain, remain_transitions, remain_shift,
                           unseen=unseen)
    pools: Dict[str, Dict[Prompt, List[PairedExample]]] = {}
    for pool_index, pool_name in enumerate(POOLS):
        source = remain_transitions if pool_name == "remain" else world.transitions
        pool = {}
        for prompt in splits.split_prompts(pool_name):
            prompt_index = prompt.genre * world.n_moods + prompt.mood
            pool[prompt] = [
                sample_pair(world, prompt.genre, prompt.mood,
                            _stream(seed, _STREAM_REF, pool_index, prompt_index, j), source)
                for j in range(ref_per_prompt)
            ]
        pools[pool_name] = pool
    splits.reference_pools = pools
    splits.validate()

    logger.info(f"数据划分完成: 遗忘集提示 {len(splits.split_prompts('forget'))} 个，"
                f"保留集提示 {len(splits.split_prompts('remain'))} 个，未见遗忘集 {len(unseen)} 个样本")
    return splits


def sample_oracle_corpus(splits: DatasetSplits, per_prompt: int, seed: int) -> List[PairedExample]:
    """
    评估器（分类器、双塔编码器）训练语料：每个提示分别从原始过程与偏移过程采样，
    与训练集、保留集、参考池使用不同的随机流
    """
    world = splits.world
    corpus = []
    for process_index, source in enumerate((world.transitions, splits.remain_transitions)):
        for prompt in world.prompts():
            prompt_index = prompt.genre * world.n_moods + prompt.mood
            for j in range(per_prompt):
                rng = _stream(seed, _STREAM_ORACLE, process_index, prompt_index, j)
                corpus.append(sample_pair(world, prompt.genre, prompt.mood, rng, source))
    return corpus


# ---------------------------------------------------------------------------
# 持久化
# ---------------------------------------------------------------------------

def _record(split: str, example: PairedExample, n_genres: int, **extra) -> str:
    record = {"split": split}
    record.update(extra)
    record["prompt"] = list(example.prompt.token_ids(n_genres))
    record["tokens"] = list(example.tokens)
    return json.dumps(record, separators=(",", ":"))


def save_splits(splits: DatasetSplits, path: Union[str, Path]) -> Path:
    """以换行分隔的 JSON 记录保存数据划分，首行为世界头记录"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    world = splits.world
    header = {
        "record": "header",
        "format_version": FORMAT_VERSION,
        "vocab_size": world.vocab_size,
        "n_genres": world.n_genres,
        "n_moods": world.n_moods,
        "seq_len": world.seq_len,
        "seed": world.seed,
        "remain_shift": splits.remain_shift,
        "initial": world.initial.reshape(-1).tolist(),
        "transitions": world.transitions.reshape(-1).tolist(),
        "remain_transitions": splits.remain_transitions.reshape(-1).tolist(),
    }
    G = world.n_genres
    lines = [json.dumps(header, separators=(",", ":"))]
    lines += [_record("train", ex, G, index=i) for i, ex in enumerate(splits.train)]
    lines += [_record("forget", splits.train[i], G, index=i) for i in splits.forget_indices]
    lines += [_record("remain", ex, G, index=i) for i, ex in enumerate(splits.remain)]
    lines += [_record("unseen", ex, G, index=i) for i, ex in enumerate(splits.unseen)]
    for pool_name in POOLS:
        for prompt, examples in sorted(splits.reference_pools.get(pool_name, {}).items()):
            owner = list(prompt.token_ids(G))
            lines += [_record("ref", ex, G, pool=pool_name, owner=owner) for ex in examples]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"数据集已保存: {path} ({len(lines)} 条记录)")
    return path


@dataclass
class SplitRecord:
    """数据集文件中的一条样本记录"""
    split: str
    example: PairedExample
    index: Optional[int] = None
    pool: Optional[str] = None
    line_number: int = 0


def _world_from_header(header: dict) -> Tuple[WorldSpec, float, np.ndarray]:
    try:
        V, G, M, L = (int(header[k]) for k in ("vocab_size", "n_genres", "n_moods", "seq_len"))
        world = WorldSpec(
            V, G, M, L, int(header["seed"]),
            np.asarray(header["transitions"], dtype=np.float64).reshape(G, M, V, V),
            np.asarray(header["initial"], dtype=np.float64).reshape(G, V),
        )
        remain = np.asarray(header.get("remain_transitions", header["transitions"]),
                            dtype=np.float64).reshape(G, M, V, V)
        shift = float(header.get("remain_shift", 0.0))
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetFormatError(f"第 1 行: 头记录无效: {e}") from e
    try:
        world.validate()
    except DatasetError as e:
        raise DatasetFormatError(f"第 1 行: {e}") from e
    return world, shift, remain


def read_records(path: Union[str, Path]) -> Tuple[WorldSpec, dict, List[SplitRecord]]:
    """
    逐行解析数据集文件，只做格式与词表校验

    Returns:
        (世界, 头记录, 样本记录列表)
    """
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"数据集文件不存在: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: 文件为空")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"第 1 行: JSON 无法解析: {e}") from e
    if not isinstance(header, dict) or header.get("record") != "header":
        raise DatasetFormatError("第 1 行: 缺少头记录")
    if header.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"第 1 行: 不支持的格式版本 {header.get('format_version')}")
    world, _, _ = _world_from_header(header)

    records = []
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            split = raw["split"]
            if split not in SPLIT_TAGS:
                raise DatasetFormatError(f"未知的划分标签 {split!r}")
            prompt = Prompt.from_token_ids(raw["prompt"], world.n_genres, world.n_moods)
            tokens = tuple(int(t) for t in raw["tokens"])
            if len(tokens) != world.seq_len:
                raise DatasetFormatError(f"序列长度 {len(tokens)} 与 L={world.seq_len} 不一致")
            if any(not 0 <= t < world.vocab_size for t in tokens):
                raise DatasetFormatError(f"token 超出音乐词表 [0, {world.vocab_size})")
            pool = raw.get("pool")
            if split == "ref":
                if pool not in POOLS:
                    raise DatasetFormatError(f"参考记录的 pool 无效: {pool!r}")
                owner = Prompt.from_token_ids(raw["owner"], world.n_genres, world.n_moods)
                if owner != prompt:
                    raise DatasetFormatError("参考记录的所属提示与提示不一致")
            index = raw.get("index")
            records.append(SplitRecord(split, PairedExample(prompt, tokens),
                                       None if index is None else int(index), pool, line_number))
        except DatasetFormatError as e:
            raise DatasetFormatError(f"第 {line_number} 行: {e}") from e
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"第 {line_number} 行: 记录格式错误: {e}") from e
    return world, header, records


def load_splits(path: Union[str, Path]) -> DatasetSplits:
    """读取数据集文件并校验划分不变量"""
    world, header, records = read_records(path)
    _, shift, remain_transitions = _world_from_header(header)

    train: List[PairedExample] = []
    remain: List[PairedExample] = []
    unseen: List[PairedExample] = []
    forget_indices: List[int] = []
    pools: Dict[str, Dict[Prompt, List[PairedExample]]] = {name: {} for name in POOLS}
    forget_records = []
    for record in records:
        if record.split == "train":
            if record.index != len(train):
                raise DatasetFormatError(f"第 {record.line_number} 行: 训练记录下标不连续")
            train.append(record.example)
        elif record.split == "remain":
            remain.append(record.example)
        elif record.split == "unseen":
            unseen.append(record.example)
        elif record.split == "forget":
            forget_records.append(record)
        else:
            pools[record.pool].setdefault(record.example.prompt, []).append(record.example)

    for record in forget_records:
        if record.index is None or not 0 <= record.index < len(train):
            raise DatasetFormatError(f"第 {record.line_number} 行: 遗忘记录下标不在训练集中")
        if train[record.index] != record.example:
            raise DatasetFormatError(f"第 {record.line_number} 行: 遗忘记录与训练样本内容不一致")
        forget_indices.append(record.index)

    splits = DatasetSplits(world, train, forget_indices, remain, remain_transitions, shift, pools, unseen)
    try:
        splits.validate()
    except SplitError as e:
        raise DatasetFormatError(f"{path}: {e}") from e
    logger.info(f"数据集已加载: {path} (train={len(train)}, forget={len(forget_indices)}, "
                f"remain={len(remain)}, unseen={len(unseen)})")
    return splits


class DatasetBuilder:
    """数据集构建 Agent"""

    def __init__(self, world_config: Optional[WorldConfig] = None,
                 split_config: Optional[SplitConfig] = None):
        self.world_config = world_config or config.world
        self.split_config = split_config or config.splits

    def build(self, world_seed: int, split_seed: int) -> DatasetSplits:
        """按配置构建世界与全部划分"""
        world = build_world(world_seed, self.world_config)
        s = self.split_config
        return make_splits(world, s.n_train, s.n_forget, s.n_remain, s.remain_shift, split_seed,
                           forget_genre=s.forget_genre, forget_selection=s.forget_selection,
                           ref_per_prompt=s.ref_per_prompt, n_unseen=s.n_unseen,
                           max_resample=s.max_resample)

    def oracle_corpus(self, splits: DatasetSplits, seed: int) -> Tuple[List[PairedExample], List[PairedExample]]:
        """评估器语料，按留出比例切分为 (训练, 留出)"""
        corpus = sample_oracle_corpus(splits, self.split_config.oracle_per_prompt, seed)
        rng = np.random.default_rng([seed, _STREAM_ORACLE])
        order = rng.permutation(len(corpus))
        n_holdout = max(1, int(round(len(corpus) * self.split_config.oracle_holdout)))
        held_out = [corpus[i] for i in order[:n_holdout]]
        training = [corpus[i] for i in order[n_holdout:]]
        return training, held_out
