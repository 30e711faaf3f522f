"""
文本到音乐模型遗忘实验主程序
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config.config import UNLEARN_METHODS, ConfigError, ExperimentConfig, load_config
from workflow import ArtifactMissingError, ExperimentResult, ExperimentWorkflow, StageError, run_sweep

SUBCOMMANDS = ("gen-data", "train", "unlearn", "evaluate", "report", "run-all", "sweep")
LOG_FILE = "ttm_unlearning.log"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_INTERRUPTED = 130

_VALIDATION_ERRORS = (ConfigError, ArtifactMissingError)


class UsageError(Exception):
    """命令行参数错误"""


class _ArgumentParser(argparse.ArgumentParser):
    """参数错误时抛出异常而不是以退出码 2 退出"""

    def error(self, message: str):
        raise UsageError(message)


def setup_logging(experiment_config: ExperimentConfig):
    """设置日志配置"""
    log_level = getattr(logging, experiment_config.logging.level.upper())

    # 创建日志目录
    log_dir = Path(experiment_config.logging.log_dir)
    log_dir.mkdir(parents=True, exist_ok=True)

    # 配置日志格式
    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    # 控制台处理器
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)

    # 文件处理器
    file_handler = logging.FileHandler(log_dir / LOG_FILE, encoding='utf-8')
    file_handler.setLevel(log_level)
    file_handler.setFormatter(formatter)

    # 配置根日志器，重复调用时替换本程序之前安装的处理器
    root_logger = logging.getLogger()
    for handler in list(root_logger.handlers):
        if getattr(handler, "_ttm_handler", False):
            root_logger.removeHandler(handler)
            handler.close()
    for handler in (console_handler, file_handler):
        handler._ttm_handler = True
        root_logger.addHandler(handler)
    root_logger.setLevel(log_level)

    # 第三方库日志级别
    logging.getLogger('langgraph').setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    """构建命令行解析器"""
    parser = _ArgumentParser(
        prog='main.py',
        description='文本到音乐模型遗忘实验 - 数据生成、训练、GA/RL 遗忘、评估与报告',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例用法:
  python main.py run-all --config config/experiment.yaml
  python main.py unlearn --method ga --output-dir runs/demo
  python main.py sweep --seeds 0 1 2
        """
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML 配置文件路径（扁平键）')
    common.add_argument('--seed', type=int, help='主种子')
    common.add_argument('--output-dir', help='输出目录（默认使用配置中的设置）')
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        type=str.upper, help='日志级别（默认使用配置中的设置）')

    subparsers = parser.add_subparsers(dest='command', parser_class=_ArgumentParser)
    subparsers.add_parser('gen-data', parents=[common], help='生成合成世界与数据划分')
    train = subparsers.add_parser('train', parents=[common], help='训练原始模型')
    train.add_argument('--steps', type=int, help='训练步数')
    unlearn = subparsers.add_parser('unlearn', parents=[common], help='从原始检查点执行遗忘')
    unlearn.add_argument('--method', required=True, help=f"遗忘方法: {', '.join(UNLEARN_METHODS)}")
    unlearn.add_argument('--steps', type=int, help='遗忘最大步数')
    subparsers.add_parser('evaluate', parents=[common], help='评估三个模型')
    subparsers.add_parser('report', parents=[common], help='从已保存的指标重新生成报告')
    run_all = subparsers.add_parser('run-all', parents=[common], help='依次执行全部阶段')
    run_all.add_argument('--steps', type=int, help='训练步数')
    sweep = subparsers.add_parser('sweep', parents=[common], help='多个主种子的完整实验与汇总')
    sweep.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2], help='主种子列表')
    sweep.add_argument('--steps', type=int, help='训练步数')
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """
    命令行参数转换为扁平键覆盖项
    优先级：命令行参数 > 配置文件 > 默认值
    """
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.output_dir:
        overrides['output.output_dir'] = args.output_dir
    if args.log_level:
        overrides['logging.level'] = args.log_level.lower()
    steps = getattr(args, 'steps', None)
    if steps is not None:
        if args.command == 'unlearn':
            overrides[f'unlearn_{args.method.lower()}.max_steps'] = steps
        else:
            overrides['train.steps'] = steps
    return overrides


def validate_method(method: str) -> str:
    method = method.lower()
    if method not in UNLEARN_METHODS:
        raise ConfigError(f"未知的遗忘方法 {method!r}，可选: {', '.join(UNLEARN_METHODS)}")
    return method


def print_banner():
    """打印程序横幅"""
    print("=" * 60)
    print("文本到音乐模型遗忘实验")
    print("=" * 60)


def print_summary(result: ExperimentResult):
    """打印实验结果摘要"""
    print("\n" + "=" * 60)
    print("实验结果摘要")
    print("=" * 60)
    print(f"📄 报告目录: {result.output_dir / 'reports'}")
    for report in result.reports:
        print(f"  {report.model:<8} {report.split:<6} FAD={report.fad:.3f} KL={report.kl:.3f} CLAP={report.clap:.3f}")
    gated = [v for v in result.verdicts if v.gated]
    print(f"📊 门控趋势判定通过 {sum(v.passed for v in gated)}/{len(gated)}")
    for method, trace in sorted(result.traces.items()):
        print(f"  {method.upper()}: {trace.steps_executed} 步, 停止原因 {trace.halt_reason.value}")
    print("=" * 60)


def run_command(args: argparse.Namespace, experiment_config: ExperimentConfig):
    """执行一个子命令"""
    if args.command == 'run-all':
        print_summary(ExperimentWorkflow(experiment_config).run())
        return
    if args.command == 'sweep':
        sweep = run_sweep(experiment_config, args.seeds)
        print(f"📄 汇总报告: {sweep.report_path}")
        return

    workflow = ExperimentWorkflow(experiment_config)
    if args.command == 'gen-data':
        workflow.run_stage('gen_data')
    elif args.command == 'train':
        workflow.run_stage('train')
    elif args.command == 'unlearn':
        workflow.run_stage('unlearn', method=args.method)
    elif args.command == 'evaluate':
        workflow.run_stage('evaluate')
    elif args.command == 'report':
        paths = workflow.run_stage('report')
        print(f"📄 报告文件: {paths['report']}")
    print(f"✅ {args.command} 完成，输出目录: {workflow.paths.root}")


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    logger = logging.getLogger(__name__)
    try:
        try:
            args = parser.parse_args(argv)
        except UsageError as e:
            parser.print_usage(sys.stderr)
            print(f"参数错误: {e}", file=sys.stderr)
            return EXIT_VALIDATION
        if args.command not in SUBCOMMANDS:
            parser.print_usage(sys.stderr)
            print(f"请指定子命令: {', '.join(SUBCOMMANDS)}", file=sys.stderr)
            return EXIT_VALIDATION

        if args.command == 'unlearn':
            validate_method(args.method)
        experiment_config = load_config(args.config, collect_overrides(args))
        setup_logging(experiment_config)
        print_banner()
        logger.info(f"子命令: {args.command}, 输出目录: {experiment_config.output.output_dir}")

        run_command(args, experiment_config)
        return EXIT_OK

    except KeyboardInterrupt:
        print("\n⚠️  用户中断执行")
        logger.info("用户中断执行")
        return EXIT_INTERRUPTED

    except _VALIDATION_ERRORS as e:
        print(f"❌ 校验失败: {e}", file=sys.stderr)
        logger.error(f"校验失败: {e}")
        return EXIT_VALIDATION

    except StageError as e:
        print(f"❌ 阶段 {e.stage} 失败: {e.cause}", file=sys.stderr)
        if isinstance(e.cause, _VALIDATION_ERRORS):
            return EXIT_VALIDATION
        return EXIT_RUNTIME

    except Exception as e:
        print(f"\n❌ 系统异常: {e}", file=sys.stderr)
        logger.error(f"系统异常: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
