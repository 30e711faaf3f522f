#!/usr/bin/env python3
"""
遗忘实验使用示例
演示如何用小配置运行完整实验，以及如何逐阶段调用 ExperimentWorkflow
"""

import sys
import logging
from pathlib import Path

# 添加项目根目录到 Python 路径
sys.path.insert(0, str(Path(__file__).parent))

from config.config import ConfigError, ExperimentConfig, apply_overrides
from workflow import ExperimentWorkflow, StageError, run_experiment

# 几秒内跑完的小世界
DEMO_OVERRIDES = {
    "world.vocab_size": 12,
    "world.n_genres": 2,
    "world.n_moods": 2,
    "world.seq_len": 8,
    "world.motif_len": 5,
    "splits.n_train": 128,
    "splits.n_forget": 8,
    "splits.n_remain": 32,
    "splits.ref_per_prompt": 8,
    "splits.oracle_per_prompt": 8,
    "model.d_model": 16,
    "model.n_layers": 1,
    "model.d_ff": 32,
    "train.steps": 60,
    "train.batch_size": 16,
    "train.lr": 0.01,
    "unlearn_ga.max_steps": 10,
    "unlearn_ga.lr": 0.001,
    "unlearn_rl.max_steps": 5,
    "unlearn_rl.lr": 0.001,
    "metrics.n_gen": 4,
    "metrics.classifier_steps": 40,
    "metrics.encoder_steps": 40,
}


def setup_example_logging():
    """设置示例日志"""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )


def demo_config(output_dir: str, seed: int = 0) -> ExperimentConfig:
    """在默认配置上叠加小世界参数"""
    overrides = dict(DEMO_OVERRIDES)
    overrides.update({"seed": seed, "output.output_dir": output_dir})
    return apply_overrides(ExperimentConfig(), overrides)


def example_full_run():
    """完整实验示例"""
    print("=" * 60)
    print("完整实验示例")
    print("=" * 60)

    cfg = demo_config("runs/example_full")
    print(f"配置哈希: {cfg.config_hash()[:16]}")

    try:
        result = run_experiment(cfg)
    except StageError as e:
        print(f"❌ {e}")
        return

    print("\n📊 指标:")
    for report in result.reports:
        print(f"  {report.model:<8} {report.split:<6} FAD={report.fad:.4f} KL={report.kl:.4f} CLAP={report.clap:.4f}")

    print("\n🧭 方向判定:")
    for v in result.verdicts:
        mark = "✅" if v.passed else ("❌" if v.gated else "·")
        print(f"  {mark} {v.method} {v.split} {v.metric}: 期望 {v.expected}，观测 {v.observed}")

    for method, trace in result.traces.items():
        print(f"遗忘轨迹 {method}: {len(trace.forget_loss)} 步，停止原因 {trace.halt_reason.value}")
    print(f"报告文件: {result.output_dir / 'reports' / 'report.md'}")


def example_stage_by_stage():
    """逐阶段执行示例"""
    print("\n" + "=" * 60)
    print("逐阶段执行示例")
    print("=" * 60)

    workflow = ExperimentWorkflow(demo_config("runs/example_stages", seed=1))
    for stage in ("gen_data", "train", "oracles"):
        workflow.run_stage(stage)
        print(f"✅ {stage}")

    # 只运行 GA，跳过 RL 后评估阶段会因缺少检查点而失败
    params, trace = workflow.run_stage("unlearn_ga")
    print(f"✅ unlearn_ga: 停止原因 {trace.halt_reason.value}")

    try:
        workflow.run_stage("evaluate")
    except StageError as e:
        print(f"预期的失败: {e}")

    workflow.run_stage("unlearn_rl")
    workflow.run_stage("evaluate")
    paths = workflow.run_stage("report")
    print(f"✅ 报告产物: {sorted(str(p) for p in paths.values())}")


def example_error_handling():
    """配置校验示例"""
    print("\n" + "=" * 60)
    print("配置校验示例")
    print("=" * 60)

    for overrides in ({"model.depth": 3}, {"sampler.temperature": 0.0}, {"splits.n_forget": 1.5}):
        try:
            cfg = apply_overrides(ExperimentConfig(), overrides)
            cfg.validate()
            print(f"未报错: {overrides}")
        except ConfigError as e:
            print(f"捕获配置错误 {overrides}: {e}")


def main():
    """主函数"""
    print("文本到音乐模型遗忘实验示例")
    print("=" * 60)

    setup_example_logging()

    try:
        example_error_handling()
        example_full_run()
        example_stage_by_stage()
    except KeyboardInterrupt:
        print("\n⚠️  用户中断执行")
    except Exception as e:
        print(f"\n❌ 示例执行失败: {e}")
        logging.exception("示例执行异常")

    print("\n✅ 示例演示完成")


if __name__ == "__main__":
    main()
