"""
测试公共设置：小规模世界、小模型与 slow 标记
"""

import os
import sys

import numpy as np
import pytest

# 添加项目根目录到 Python 路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from agents.dataset_builder import WorldSpec, build_world, make_splits
from agents.ttm_model import init_params, train
from config.config import ExperimentConfig, ModelConfig, TrainSchedule, WorldConfig, apply_overrides

FIXTURES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="运行默认配置下的验收实验")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 默认配置下的完整验收实验，耗时较长")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow") or "slow" in (config.getoption("-m") or ""):
        return
    skip_slow = pytest.mark.skip(reason="需要 --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def small_world_config() -> WorldConfig:
    return WorldConfig(vocab_size=16, n_genres=2, n_moods=2, seq_len=8, motif_len=5)


def cycle_world(vocab_size: int = 8, seq_len: int = 8) -> WorldSpec:
    """确定性循环世界：风格 0 步长 1 从 0 开始，风格 1 步长 3 从 5 开始"""
    transitions = np.zeros((2, 1, vocab_size, vocab_size))
    initial = np.zeros((2, vocab_size))
    for genre, (stride, start) in enumerate(((1, 0), (3, 5))):
        for t in range(vocab_size):
            transitions[genre, 0, t, (t + stride) % vocab_size] = 1.0
        initial[genre, start] = 1.0
    return WorldSpec(vocab_size, 2, 1, seq_len, 0, transitions, initial)


def small_model_config(vocab_size: int = 16, n_genres: int = 2, n_moods: int = 2, seq_len: int = 8,
                       init_seed: int = 0) -> ModelConfig:
    return ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, music_vocab=vocab_size,
                       n_genres=n_genres, n_moods=n_moods, seq_len=seq_len, init_seed=init_seed)


SMALL_EXPERIMENT_OVERRIDES = {
    "world.vocab_size": 12,
    "world.n_genres": 2,
    "world.n_moods": 2,
    "world.seq_len": 8,
    "world.motif_len": 5,
    "splits.n_train": 128,
    "splits.n_forget": 8,
    "splits.n_remain": 32,
    "splits.n_unseen": 16,
    "splits.ref_per_prompt": 8,
    "splits.oracle_per_prompt": 8,
    "model.d_model": 16,
    "model.n_heads": 2,
    "model.n_layers": 1,
    "model.d_ff": 32,
    "train.steps": 60,
    "train.batch_size": 16,
    "train.lr": 0.01,
    "train.log_every": 0,
    "unlearn_ga.max_steps": 10,
    "unlearn_ga.lr": 0.001,
    "unlearn_ga.batch_size": 8,
    "unlearn_rl.max_steps": 5,
    "unlearn_rl.lr": 0.001,
    "unlearn_rl.batch_size": 8,
    "metrics.n_gen": 4,
    "metrics.embed_dim": 8,
    "metrics.clap_dim": 4,
    "metrics.classifier_hidden": 16,
    "metrics.classifier_steps": 40,
    "metrics.encoder_hidden": 16,
    "metrics.encoder_steps": 40,
}


def small_experiment_config(output_dir, seed: int = 0) -> ExperimentConfig:
    """端到端测试使用的小配置，几秒内跑完全部阶段"""
    overrides = dict(SMALL_EXPERIMENT_OVERRIDES)
    overrides.update({"seed": seed, "output.output_dir": str(output_dir),
                      "logging.log_dir": os.path.join(str(output_dir), os.pardir, "logs")})
    cfg = apply_overrides(ExperimentConfig(), overrides)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def small_splits():
    """V=16, G=2, M=2, L=8 的小世界及其划分"""
    world = build_world(7, small_world_config())
    return make_splits(world, n_train=64, n_forget=8, n_remain=16, remain_shift=0.3, seed=11,
                       forget_genre=0, ref_per_prompt=8)


@pytest.fixture(scope="session")
def trained_small(small_splits):
    """在小世界训练集上训练过的小模型参数"""
    params = init_params(small_model_config())
    trained, _ = train(params, small_splits.train,
                       TrainSchedule(steps=150, batch_size=16, lr=1e-2, seed=3, log_every=0))
    return trained
