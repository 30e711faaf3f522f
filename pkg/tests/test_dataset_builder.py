"""
测试合成世界、数据划分、参考池与数据集文件读写
"""

import copy
import json
import os
import sys

import numpy as np
import pytest

# 添加项目根目录到 Python 路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from agents.dataset_builder import (DatasetBuilder, DatasetError, DatasetFormatError, Prompt, SplitError,
                                    WorldBuildError, build_world, load_splits, make_splits, mean_row_tv,
                                    read_records, sample_oracle_corpus, sample_pair, save_splits,
                                    shift_transitions)
from config.config import SplitConfig, WorldConfig
from conftest import FIXTURES_DIR, cycle_world, small_world_config


class TestWorld:
    """测试世界构建与采样"""

    def setup_method(self):
        """测试前设置"""
        self.world_config = small_world_config()

    def test_rows_are_stochastic(self):
        """转移矩阵与初始分布均为概率分布"""
        world = build_world(1, self.world_config)
        assert (world.transitions >= 0).all()
        np.testing.assert_allclose(world.transitions.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(world.initial.sum(axis=-1), 1.0, atol=1e-12)

    def test_prompt_processes_are_distinguishable(self):
        """任意两个提示的转移矩阵距离不小于下限"""
        world = build_world(1, self.world_config)
        flat = world.transitions.reshape(-1, world.vocab_size, world.vocab_size)
        for i in range(len(flat)):
            for j in range(i + 1, len(flat)):
                assert mean_row_tv(flat[i], flat[j]) >= self.world_config.min_tv_distance

    def test_same_seed_same_world(self):
        """同一种子得到逐位相同的世界"""
        a, b = build_world(5, self.world_config), build_world(5, self.world_config)
        assert np.array_equal(a.transitions, b.transitions)
        assert np.array_equal(a.initial, b.initial)
        assert not np.array_equal(a.transitions, build_world(6, self.world_config).transitions)

    def test_too_small_world_rejected(self):
        """词表过小"""
        with pytest.raises(WorldBuildError):
            build_world(0, WorldConfig(vocab_size=4, n_genres=2, n_moods=1, seq_len=8, motif_len=3,
                                       sparse_support=2))

    def test_rejection_limit(self):
        """无法满足的距离下限在拒绝上限后报错"""
        cfg = small_world_config()
        cfg.min_tv_distance = 2.0
        cfg.max_rejections = 3
        with pytest.raises(WorldBuildError):
            build_world(0, cfg)

    def test_sample_pair_shape_and_determinism(self):
        """样本长度为 L，token 在词表内，同一随机流结果相同"""
        world = build_world(1, self.world_config)
        a = sample_pair(world, 1, 0, np.random.default_rng(3))
        b = sample_pair(world, 1, 0, np.random.default_rng(3))
        assert a == b
        assert a.prompt == Prompt(1, 0)
        assert len(a.tokens) == world.seq_len
        assert all(0 <= t < world.vocab_size for t in a.tokens)

    def test_cycle_world_is_reproduced(self):
        """确定性世界中的样本严格沿循环前进"""
        world = cycle_world()
        assert sample_pair(world, 0, 0, np.random.default_rng(0)).tokens == (0, 1, 2, 3, 4, 5, 6, 7)
        assert sample_pair(world, 1, 0, np.random.default_rng(0)).tokens == (5, 0, 3, 6, 1, 4, 7, 2)

    def test_invalid_prompt(self):
        """提示超出范围"""
        world = cycle_world()
        with pytest.raises(DatasetError):
            sample_pair(world, 2, 0, np.random.default_rng(0))


class TestSplits:
    """测试数据划分不变量"""

    def setup_method(self):
        """测试前设置"""
        self.world = build_world(7, small_world_config())

    def test_invariants(self, small_splits):
        """F ⊆ train、遗忘集集中于遗忘风格、保留集与训练集不相交、参考池足够大"""
        splits = small_splits
        assert len(splits.train) == 64
        assert len(splits.forget_indices) == 8
        assert len(set(splits.forget_indices)) == 8
        assert all(ex.prompt.genre == 0 for ex in splits.forget)
        train_hashes = {ex.content_hash() for ex in splits.train}
        assert not any(ex.content_hash() in train_hashes for ex in splits.remain)
        for pool_name in ("forget", "remain"):
            pool = splits.reference_pools[pool_name]
            assert sorted(pool) == splits.split_prompts(pool_name)
            assert all(len(examples) == 8 for examples in pool.values())

    def test_reference_pools_follow_split_prompts(self, small_splits):
        """遗忘参考池只包含遗忘风格的提示，每条参考样本属于所在的提示"""
        for prompt, examples in small_splits.reference_pools["forget"].items():
            assert prompt.genre == 0
            assert all(ex.prompt == prompt for ex in examples)

    def test_deterministic(self):
        """同一种子得到相同划分"""
        a = make_splits(self.world, 32, 4, 8, 0.3, seed=2, ref_per_prompt=8)
        b = make_splits(self.world, 32, 4, 8, 0.3, seed=2, ref_per_prompt=8)
        assert a.train == b.train
        assert a.forget_indices == b.forget_indices
        assert a.remain == b.remain

    def test_zero_shift_keeps_transitions(self):
        """偏移为 0 时保留集使用原始矩阵"""
        splits = make_splits(self.world, 32, 4, 8, 0.0, seed=2, ref_per_prompt=8)
        assert np.array_equal(splits.remain_transitions, self.world.transitions)

    def test_random_selection(self):
        """随机选择的遗忘集仍是训练集子集"""
        splits = make_splits(self.world, 32, 4, 8, 0.3, seed=2, forget_selection="random", ref_per_prompt=8)
        assert len(splits.forget) == 4
        assert all(0 <= i < 32 for i in splits.forget_indices)

    def test_genre_shortage_is_filled(self):
        """遗忘风格样本不足时用其他训练样本补齐"""
        splits = make_splits(self.world, 16, 12, 8, 0.3, seed=2, ref_per_prompt=8)
        assert len(splits.forget_indices) == 12
        assert len(set(splits.forget_indices)) == 12

    def test_unseen_split(self):
        """未见遗忘集来自遗忘提示、与训练集不相交，且不改变其他划分"""
        base = make_splits(self.world, 64, 8, 16, 0.3, seed=2, ref_per_prompt=8)
        splits = make_splits(self.world, 64, 8, 16, 0.3, seed=2, ref_per_prompt=8, n_unseen=12)
        assert len(splits.unseen) == 12
        assert set(splits.split_prompts("unseen")) <= set(splits.split_prompts("forget"))
        train_hashes = {ex.content_hash() for ex in splits.train}
        assert not any(ex.content_hash() in train_hashes for ex in splits.unseen)
        assert sorted(splits.reference_pools["unseen"]) == splits.split_prompts("unseen")
        assert (splits.train, splits.forget_indices, splits.remain) == (base.train, base.forget_indices, base.remain)
        for pool_name in ("forget", "remain"):
            assert splits.reference_pools[pool_name] == base.reference_pools[pool_name]
        assert base.unseen == [] and base.reference_pools["unseen"] == {}

    def test_remain_resample_cap(self):
        """确定性世界中保留集只能重复训练样本，重抽达到上限后报错而不是死循环"""
        with pytest.raises(SplitError, match="保留集.*0/2"):
            make_splits(cycle_world(), 16, 2, 2, 0.0, seed=0, ref_per_prompt=8, max_resample=5)

    def test_unseen_resample_cap(self):
        """遗忘提示在确定性世界中只有一条序列，未见遗忘集无法与训练集不相交"""
        with pytest.raises(SplitError, match="未见遗忘集.*0/2"):
            make_splits(cycle_world(), 16, 2, 2, 1.0, seed=0, ref_per_prompt=8, n_unseen=2, max_resample=5)

    def test_remain_shift_distance_is_monotone(self):
        """保留集矩阵与训练矩阵的平均行 TV 距离随偏移强度单调上升"""
        distances = [mean_row_tv(self.world.transitions, shift_transitions(self.world, s, seed=3))
                     for s in (0.0, 0.3, 0.6)]
        assert distances[0] == 0.0
        assert 0.0 < distances[1] < distances[2]

    def test_empty_remain_set_rejected(self, small_splits):
        """保留集为空的划分不能通过校验"""
        broken = copy.copy(small_splits)
        broken.remain = []
        with pytest.raises(SplitError, match="保留集为空"):
            broken.validate()

    def test_default_sizes_keep_remain_and_unseen_outside_train(self):
        """默认规模下保留集与未见遗忘集按内容哈希与训练集不相交"""
        splits = DatasetBuilder(WorldConfig(), SplitConfig()).build(world_seed=0, split_seed=0)
        assert (len(splits.train), len(splits.forget), len(splits.remain)) == (4096, 64, 512)
        train_hashes = {ex.content_hash() for ex in splits.train}
        assert not train_hashes & {ex.content_hash() for ex in splits.remain}
        assert not train_hashes & {ex.content_hash() for ex in splits.unseen}
        assert len(splits.unseen) == SplitConfig().n_unseen

    @pytest.mark.parametrize("kwargs", [
        {"n_forget": 0},
        {"n_forget": 40},
        {"n_remain": 0},
        {"remain_shift": 1.5},
        {"ref_per_prompt": 4},
        {"forget_genre": 5},
        {"n_unseen": -1},
        {"max_resample": 0},
    ])
    def test_invalid_arguments(self, kwargs):
        """非法划分参数"""
        args = {"n_train": 32, "n_forget": 4, "n_remain": 8, "remain_shift": 0.3, "seed": 0, "ref_per_prompt": 8}
        args.update(kwargs)
        with pytest.raises(SplitError):
            make_splits(self.world, **args)

    def test_oracle_corpus(self, small_splits):
        """评估器语料覆盖全部提示与两个过程"""
        corpus = sample_oracle_corpus(small_splits, per_prompt=5, seed=11)
        assert len(corpus) == 2 * len(small_splits.world.prompts()) * 5
        assert {ex.prompt for ex in corpus} == set(small_splits.world.prompts())

    def test_builder_holdout(self, small_splits):
        """DatasetBuilder 按比例切分评估器语料"""
        builder = DatasetBuilder(small_world_config(), SplitConfig(oracle_per_prompt=8, oracle_holdout=0.25))
        training, held_out = builder.oracle_corpus(small_splits, seed=4)
        assert len(training) + len(held_out) == 2 * 4 * 8
        assert len(held_out) == 16

class TestSamplingStatistics:
    """测试采样序列与生成矩阵的统计一致性"""

    def setup_method(self):
        """测试前设置"""
        cfg = small_world_config()
        cfg.seq_len = 32
        self.world = build_world(3, cfg)
        rng = np.random.default_rng(0)
        self.samples = np.array([sample_pair(self.world, 0, 1, rng).tokens for _ in range(10000)])

    def test_bigram_frequencies_match_transitions(self):
        """一万条样本的经验转移频率与生成矩阵的最大绝对误差小于 0.03"""
        V = self.world.vocab_size
        counts = np.zeros((V, V))
        np.add.at(counts, (self.samples[:, :-1].ravel(), self.samples[:, 1:].ravel()), 1)
        visits = counts.sum(axis=1)
        rows = visits >= 5000
        assert rows.sum() >= 3
        empirical = counts[rows] / visits[rows, None]
        assert np.abs(empirical - self.world.transitions[0, 1][rows]).max() < 0.03

    def test_long_run_histogram_matches_stationary(self):
        """末位 token 的直方图与平稳分布的最大绝对误差小于 0.03"""
        P = self.world.transitions[0, 1]
        values, vectors = np.linalg.eig(P.T)
        stationary = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
        stationary = stationary / stationary.sum()
        histogram = np.bincount(self.samples[:, -1], minlength=self.world.vocab_size) / len(self.samples)
        assert np.abs(histogram - stationary).max() < 0.03



class TestPersistence:
    """测试数据集文件"""

    def test_round_trip(self, small_splits, tmp_path):
        """保存后读取得到相同的世界与划分"""
        path = save_splits(small_splits, tmp_path / "dataset.jsonl")
        loaded = load_splits(path)
        assert np.array_equal(loaded.world.transitions, small_splits.world.transitions)
        assert np.array_equal(loaded.remain_transitions, small_splits.remain_transitions)
        assert loaded.train == small_splits.train
        assert loaded.forget_indices == small_splits.forget_indices
        assert loaded.remain == small_splits.remain
        assert loaded.reference_pools == small_splits.reference_pools

    def test_save_is_byte_deterministic(self, small_splits, tmp_path):
        """两次保存字节相同"""
        a = save_splits(small_splits, tmp_path / "a.jsonl").read_bytes()
        b = save_splits(small_splits, tmp_path / "b.jsonl").read_bytes()
        assert a == b

    def test_save_load_save_is_fixpoint(self, small_splits, tmp_path):
        """保存、读取、再保存得到逐字节相同的文件"""
        first = save_splits(small_splits, tmp_path / "first.jsonl")
        second = save_splits(load_splits(first), tmp_path / "second.jsonl")
        assert first.read_bytes() == second.read_bytes()

    def test_unseen_split_round_trip(self, tmp_path):
        """未见遗忘集及其参考池随数据集文件保存与读取"""
        world = build_world(7, small_world_config())
        splits = make_splits(world, 64, 8, 16, 0.3, seed=2, ref_per_prompt=8, n_unseen=6)
        first = save_splits(splits, tmp_path / "first.jsonl")
        loaded = load_splits(first)
        assert loaded.unseen == splits.unseen
        assert loaded.reference_pools["unseen"] == splits.reference_pools["unseen"]
        assert save_splits(loaded, tmp_path / "second.jsonl").read_bytes() == first.read_bytes()
        records = [json.loads(line) for line in first.read_text(encoding="utf-8").splitlines()[1:]]
        assert sum(r["split"] == "unseen" for r in records) == 6

    def test_two_record_fixture(self):
        """最小的两条记录文件可以逐条解析"""
        world, header, records = read_records(os.path.join(FIXTURES_DIR, "two_records.jsonl"))
        assert world.vocab_size == 2
        assert [r.split for r in records] == ["train", "remain"]
        assert records[0].example.tokens == (0, 1, 0, 1)
        assert records[1].example.prompt == Prompt(0, 0)

    def test_two_record_fixture_has_no_forget_set(self):
        """没有遗忘记录的文件不能作为完整划分加载"""
        with pytest.raises(DatasetFormatError):
            load_splits(os.path.join(FIXTURES_DIR, "two_records.jsonl"))

    def test_errors_carry_line_numbers(self, small_splits, tmp_path):
        """格式错误报告行号"""
        path = save_splits(small_splits, tmp_path / "dataset.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()

        bad = json.loads(lines[2])
        bad["tokens"][0] = 99
        lines_token = lines[:2] + [json.dumps(bad)] + lines[3:]
        path.write_text("\n".join(lines_token) + "\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="第 3 行"):
            read_records(path)

        path.write_text("\n".join(lines[:4] + ["{not json"]) + "\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="第 5 行"):
            read_records(path)

    def test_wrong_format_version(self, small_splits, tmp_path):
        """格式版本不符"""
        path = save_splits(small_splits, tmp_path / "dataset.jsonl")
        lines = path.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        header["format_version"] = 99
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n", encoding="utf-8")
        with pytest.raises(DatasetFormatError, match="格式版本"):
            read_records(path)

    def test_missing_file(self, tmp_path):
        """文件不存在"""
        with pytest.raises(DatasetFormatError):
            read_records(tmp_path / "absent.jsonl")


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
