"""
测试配置加载、覆盖优先级、子种子派生与配置哈希
"""

import math
import os
import sys

import pytest

# 添加项目根目录到 Python 路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.config import (ConfigError, ExperimentConfig, UnlearnConfig, apply_overrides, derive_seed,
                           load_config)

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEFAULT_YAML = os.path.join(PROJECT_ROOT, "config", "experiment.yaml")


class TestConfigLoading:
    """测试配置文件与覆盖项"""

    def setup_method(self):
        """测试前设置"""
        self.defaults = ExperimentConfig()

    def test_defaults_are_valid(self):
        """默认配置通过校验"""
        assert self.defaults.validate()

    def test_shipped_yaml_matches_defaults(self, monkeypatch):
        """仓库自带的 experiment.yaml 与数据类默认值一致"""
        monkeypatch.delenv("TTM_LOG_LEVEL", raising=False)
        loaded = load_config(DEFAULT_YAML)
        assert loaded.config_hash() == self.defaults.config_hash()

    def test_override_precedence(self, tmp_path, monkeypatch):
        """命令行覆盖项 > 配置文件 > 默认值"""
        monkeypatch.delenv("TTM_LOG_LEVEL", raising=False)
        path = tmp_path / "cfg.yaml"
        path.write_text("train.steps: 10\nunlearn_ga.lr: 0.01\n", encoding="utf-8")
        cfg = load_config(path, {"train.steps": 20})
        assert cfg.train.steps == 20
        assert cfg.unlearn_ga.lr == 0.01
        assert cfg.train.batch_size == self.defaults.train.batch_size

    def test_nested_yaml_is_accepted(self, tmp_path, monkeypatch):
        """嵌套映射与扁平键等价"""
        monkeypatch.delenv("TTM_LOG_LEVEL", raising=False)
        path = tmp_path / "nested.yaml"
        path.write_text("splits:\n  n_forget: 32\n", encoding="utf-8")
        assert load_config(path).splits.n_forget == 32

    def test_environment_log_level(self, monkeypatch):
        """环境变量 TTM_LOG_LEVEL 覆盖日志级别"""
        monkeypatch.setenv("TTM_LOG_LEVEL", "DEBUG")
        assert load_config().logging.level == "debug"

    def test_unknown_key_rejected(self):
        """未知配置项"""
        with pytest.raises(ConfigError, match="world.colour"):
            apply_overrides(self.defaults, {"world.colour": 3})

    def test_wrong_type_rejected(self):
        """类型不符"""
        with pytest.raises(ConfigError):
            apply_overrides(self.defaults, {"train.steps": "many"})
        with pytest.raises(ConfigError):
            apply_overrides(self.defaults, {"train.steps": True})

    def test_int_promoted_to_float(self):
        """整数可以写入浮点字段"""
        cfg = apply_overrides(self.defaults, {"splits.remain_shift": 0})
        assert isinstance(cfg.splits.remain_shift, float)

    def test_overrides_do_not_mutate_base(self):
        """覆盖返回新对象"""
        apply_overrides(self.defaults, {"seed": 5})
        assert self.defaults.seed == 0

    def test_missing_file(self, tmp_path):
        """配置文件不存在"""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.yaml")

    def test_non_mapping_document(self, tmp_path):
        """顶层不是映射"""
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)


class TestConfigValidation:
    """测试配置校验"""

    def setup_method(self):
        """测试前设置"""
        self.defaults = ExperimentConfig()

    @pytest.mark.parametrize("overrides", [
        {"splits.n_forget": 0},
        {"splits.n_forget": 5000},
        {"splits.remain_shift": 1.5},
        {"splits.ref_per_prompt": 4},
        {"world.vocab_size": 4},
        {"model.n_heads": 3},
        {"sampler.temperature": 0.0},
        {"sampler.top_k": 65},
        {"unlearn_ga.explode_threshold": 1.0},
        {"unlearn_rl.relabel_policy": "sometimes"},
        {"unlearn_ga.max_steps": -1},
        {"splits.forget_selection": "oldest"},
        {"splits.n_unseen": -1},
        {"splits.max_resample": 0},
    ])
    def test_invalid_values(self, overrides):
        """非法取值在运行前被拒绝"""
        with pytest.raises(ConfigError):
            apply_overrides(self.defaults, overrides).validate()

    def test_zero_step_budget_allowed(self):
        """遗忘步数为 0 是合法配置"""
        assert apply_overrides(self.defaults, {"unlearn_ga.max_steps": 0}).validate()

    def test_optional_split_and_shuffle_policy_allowed(self):
        """未见遗忘集可以关闭，置换重标注策略合法"""
        cfg = apply_overrides(self.defaults, {"splits.n_unseen": 0, "unlearn_rl.relabel_policy": "shuffle"})
        assert cfg.validate()

    def test_default_explode_threshold(self):
        """未设置阈值时为 3·ln V"""
        assert UnlearnConfig().resolved_threshold(64) == pytest.approx(3 * math.log(64))

    def test_unknown_method(self):
        """未知遗忘方法列出可选项"""
        with pytest.raises(ConfigError, match="ga, rl"):
            self.defaults.unlearn_config("sgd")

    def test_resolved_syncs_model_with_world(self):
        """resolved 使模型词表与世界一致，并派生各阶段种子"""
        cfg = apply_overrides(self.defaults, {"world.vocab_size": 32, "world.n_genres": 4}).resolved()
        assert cfg.model.music_vocab == 32
        assert cfg.model.n_genres == 4
        assert cfg.train.seed == derive_seed(0, "train")
        assert cfg.unlearn_ga.seed != cfg.unlearn_rl.seed


class TestSeedsAndHash:
    """测试子种子与配置哈希"""

    def test_derive_seed_is_deterministic_and_tagged(self):
        """同一 (主种子, 标签) 得到同一子种子，不同标签不同"""
        assert derive_seed(3, "train") == derive_seed(3, "train")
        tags = ["world", "splits", "init", "train", "unlearn-ga", "unlearn-rl", "evaluate"]
        assert len({derive_seed(3, tag) for tag in tags}) == len(tags)
        assert derive_seed(3, "train") != derive_seed(4, "train")
        assert 0 <= derive_seed(3, "train") < 2 ** 64

    def test_hash_ignores_output_and_logging(self):
        """输出目录与日志设置不影响配置哈希"""
        a = apply_overrides(ExperimentConfig(), {"output.output_dir": "runs/a", "logging.level": "debug"})
        b = apply_overrides(ExperimentConfig(), {"output.output_dir": "runs/b"})
        assert a.config_hash() == b.config_hash()

    def test_hash_tracks_semantic_fields(self):
        """主种子或超参数变化改变哈希"""
        base = ExperimentConfig()
        assert apply_overrides(base, {"seed": 1}).config_hash() != base.config_hash()
        assert apply_overrides(base, {"unlearn_ga.lr": 1e-3}).config_hash() != base.config_hash()

    def test_yaml_round_trip(self, tmp_path, monkeypatch):
        """to_yaml 写出的文件重新加载后哈希不变"""
        monkeypatch.delenv("TTM_LOG_LEVEL", raising=False)
        cfg = apply_overrides(ExperimentConfig(), {"seed": 9, "unlearn_ga.explode_threshold": 20.0})
        path = tmp_path / "dump.yaml"
        path.write_text(cfg.to_yaml(), encoding="utf-8")
        assert load_config(path).config_hash() == cfg.config_hash()


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
