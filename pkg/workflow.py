"""
基于 LangGraph 的遗忘实验工作流程
数据生成 → 基础训练 → 评估器训练 → GA / RL 遗忘 → 评估 → 报告
"""

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypedDict

from langgraph.checkpoint.memory import MemorySaver
from langgraph.graph import END, StateGraph

from agents import (DatasetBuilder, DatasetSplits, MetricEvaluator, MetricReport, ModelParams,
                    OracleSet, ReportGenerator, TTMModel, Unlearner, UnlearnTrace)
from agents import dataset_builder
from agents.metric_evaluator import MODEL_LABELS, REQUIRED_SPLITS, SPLITS, MetricError, build_oracles
from agents.report_generator import (TrendVerdict, compute_verdicts, load_summary, read_metrics_csv,
                                     write_metrics_csv)
from agents.ttm_model import evaluate_nll, load_checkpoint, save_checkpoint
from agents.unlearner import UnlearnError, read_trace
from config.config import UNLEARN_METHODS, ConfigError, ExperimentConfig, apply_overrides
from utils import tensor_io
from utils.tensor_io import file_sha256

logger = logging.getLogger(__name__)

STAGES = ("gen_data", "train", "oracles", "unlearn_ga", "unlearn_rl", "evaluate", "report")
METHOD_LABELS = {"ga": "GA", "rl": "RL"}


class StageError(Exception):
    """某个阶段失败，保留阶段名与原始异常"""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"阶段 {stage} 失败: {cause}")
        self.stage = stage
        self.cause = cause


class ArtifactMissingError(Exception):
    """阶段所需的输入文件不存在"""

    def __init__(self, path: Path):
        super().__init__(f"缺少输入文件: {path}")
        self.path = Path(path)


class ExperimentState(TypedDict):
    """工作流状态（只保存可序列化的路径与状态信息）"""
    output_dir: str
    artifacts: Dict[str, str]
    current_step: str
    failed_stage: str
    error_message: str
    completed: bool


@dataclass
class ExperimentPaths:
    """输出目录下的全部产物路径"""
    root: Path

    @property
    def dataset(self) -> Path:
        return self.root / "dataset.jsonl"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def original(self) -> Path:
        return self.checkpoints / "original.ckpt"

    def unlearned(self, method: str) -> Path:
        return self.checkpoints / f"{method}.ckpt"

    @property
    def train_trace(self) -> Path:
        return self.root / "traces" / "train_loss.csv"

    def unlearn_trace(self, method: str) -> Path:
        return self.root / "traces" / f"unlearn_{method}.csv"

    @property
    def oracles(self) -> Path:
        return self.root / "oracles"

    @property
    def gates(self) -> Path:
        return self.oracles / "gates.json"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def metrics(self) -> Path:
        return self.reports / "metrics.csv"

    @property
    def summary(self) -> Path:
        return self.reports / "summary.json"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


@dataclass
class ExperimentResult:
    """一次完整实验的结果"""
    output_dir: Path
    config_hash: str
    reports: List[MetricReport]
    traces: Dict[str, UnlearnTrace]
    checkpoints: Dict[str, Path]
    verdicts: List[TrendVerdict]
    gates: Dict[str, Any] = field(default_factory=dict)

    def validate(self):
        combos = sorted((r.model, r.split) for r in self.reports)
        splits = [s for s in SPLITS if s in REQUIRED_SPLITS or any(r.split == s for r in self.reports)]
        expected = sorted((m, s) for m in MODEL_LABELS for s in splits)
        if combos != expected:
            raise MetricError(f"实验结果应包含 {len(expected)} 个 (模型, 划分) 组合，实际为 {combos}")


def _require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactMissingError(path)
    return path


def _dump_json(obj: Any, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


class ExperimentWorkflow:
    """遗忘实验工作流程"""

    def __init__(self, experiment_config: ExperimentConfig):
        experiment_config.validate()
        self.base_config = experiment_config
        self.config = experiment_config.resolved()
        self.config_hash = experiment_config.config_hash()
        self.paths = ExperimentPaths(Path(self.config.output.output_dir))

        self.dataset_builder = DatasetBuilder(self.config.world, self.config.splits)
        self.model = TTMModel(self.config.model)
        self.report_generator = ReportGenerator()

        self._splits: Optional[DatasetSplits] = None
        self._oracles: Optional[OracleSet] = None
        self._failure: Optional[StageError] = None

        # 创建工作流图
        self.workflow = self._create_workflow()
        self.app = self.workflow.compile(checkpointer=MemorySaver())

    # ------------------------------------------------------------------
    # 阶段
    # ------------------------------------------------------------------

    def gen_data(self) -> DatasetSplits:
        """生成世界与数据划分并写入 dataset.jsonl"""
        splits = self.dataset_builder.build(self.config.derive_seed("world"), self.config.derive_seed("splits"))
        dataset_builder.save_splits(splits, self.paths.dataset)
        self._splits = splits
        return splits

    def splits(self) -> DatasetSplits:
        if self._splits is None:
            self._splits = dataset_builder.load_splits(_require(self.paths.dataset))
        return self._splits

    def train(self) -> ModelParams:
        """训练原始模型，写入检查点与损失曲线"""
        params, curve = self.model.fit(self.splits().train, self.config.train)
        save_checkpoint(params, self.paths.original)
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows([step, repr(loss)] for step, loss in enumerate(curve))
        self.paths.train_trace.parent.mkdir(parents=True, exist_ok=True)
        self.paths.train_trace.write_text(buffer.getvalue(), encoding="utf-8")
        return params

    def build_oracles(self) -> OracleSet:
        """训练并冻结评估器，保存门限"""
        splits = self.splits()
        training, held_out = self.dataset_builder.oracle_corpus(splits, self.config.derive_seed("oracle-corpus"))
        seeds = {tag: self.config.derive_seed(tag) for tag in ("embedder", "classifier", "dual-encoder")}
        oracles = build_oracles(training, held_out, splits, self.config.metrics, seeds)
        oracles.save(self.paths.oracles)
        _dump_json(oracles.gates.as_dict(), self.paths.gates)
        _dump_json(oracles.hashes, self.paths.oracles / "hashes.json")
        if self.config.metrics.enforce_quality_gates and not oracles.gates.passed:
            raise MetricError(f"评估器质量门限未通过: {oracles.gates.as_dict()}")
        self._oracles = oracles
        return oracles

    def oracles(self) -> OracleSet:
        if self._oracles is None:
            if (self.paths.oracles / "encoder.bundle").exists():
                self._oracles = OracleSet.load(self.paths.oracles)
            else:
                logger.info("未找到已保存的评估器，开始训练")
                self.build_oracles()
            if self.config.metrics.enforce_quality_gates and not self._oracles.gates.passed:
                raise MetricError(f"评估器质量门限未通过: {self._oracles.gates.as_dict()}")
        return self._oracles

    def unlearn(self, method: str) -> Tuple[ModelParams, UnlearnTrace]:
        """从原始检查点出发执行一种遗忘方法；原始检查点只读"""
        method = method.lower()
        if method not in UNLEARN_METHODS:
            raise ConfigError(f"未知的遗忘方法 {method!r}，可选: {', '.join(UNLEARN_METHODS)}")
        original_path = _require(self.paths.original)
        before = file_sha256(original_path)
        params = load_checkpoint(original_path)

        unlearned, trace = Unlearner(self.config.unlearn_config(method)).run(params, self.splits().forget)
        save_checkpoint(unlearned, self.paths.unlearned(method))
        trace.save(self.paths.unlearn_trace(method))

        if file_sha256(original_path) != before:
            raise UnlearnError(f"原始检查点 {original_path} 在遗忘阶段被修改")
        return unlearned, trace

    def evaluate(self) -> List[MetricReport]:
        """评估三个模型，写出指标 CSV 与评估摘要"""
        splits = self.splits()
        checkpoints = {"Original": self.paths.original}
        checkpoints.update({METHOD_LABELS[m]: self.paths.unlearned(m) for m in UNLEARN_METHODS})
        models = {label: load_checkpoint(_require(path)) for label, path in checkpoints.items()}

        evaluator = MetricEvaluator(self.oracles(), self.config.sampler, self.config.metrics)
        reports, nll_rows = [], []
        for label in MODEL_LABELS:
            reports.extend(evaluator.evaluate(models[label], splits, label))
            row = {
                "model": label,
                "forget": evaluate_nll(models[label], splits.forget),
                "remain": evaluate_nll(models[label], splits.remain),
            }
            if splits.unseen:
                row["unseen"] = evaluate_nll(models[label], splits.unseen)
            nll_rows.append(row)
        write_metrics_csv(reports, self.paths.metrics)

        traces = {}
        for method in UNLEARN_METHODS:
            trace = read_trace(_require(self.paths.unlearn_trace(method)), method)
            traces[method] = {
                "steps": trace.steps_executed,
                "halt_reason": trace.halt_reason.value,
                "initial_loss": trace.forget_loss[0] if trace.forget_loss else None,
                "final_loss": trace.forget_loss[-1] if trace.forget_loss else None,
            }
        _dump_json({
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "format_versions": {"dataset": dataset_builder.FORMAT_VERSION, "tensor_bundle": tensor_io.FORMAT_VERSION},
            "gates": self.oracles().gates.as_dict(),
            "nll": nll_rows,
            "traces": traces,
        }, self.paths.summary)
        return reports

    def report(self) -> Dict[str, Path]:
        """只从持久化的指标与摘要重新生成报告"""
        reports = read_metrics_csv(_require(self.paths.metrics))
        summary = load_summary(_require(self.paths.summary))
        return self.report_generator.generate_report(reports, summary, self.paths.reports)

    def write_manifest(self) -> Path:
        """列出输出目录下的全部产物及其 sha256"""
        artifacts = {}
        for path in sorted(self.paths.root.rglob("*")):
            if path.is_file() and path != self.paths.manifest:
                artifacts[path.relative_to(self.paths.root).as_posix()] = file_sha256(path)
        manifest = {
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "format_versions": {"dataset": dataset_builder.FORMAT_VERSION, "tensor_bundle": tensor_io.FORMAT_VERSION},
            "artifacts": artifacts,
        }
        if self.paths.gates.exists():
            manifest["quality_gates"] = json.loads(self.paths.gates.read_text(encoding="utf-8"))
        hashes_path = self.paths.oracles / "hashes.json"
        if hashes_path.exists():
            manifest["oracle_hashes"] = json.loads(hashes_path.read_text(encoding="utf-8"))
        _dump_json(manifest, self.paths.manifest)
        return self.paths.manifest

    def run_stage(self, stage: str, **kwargs) -> Any:
        """执行单个阶段，失败时包装为 StageError；成功后刷新清单"""
        actions: Dict[str, Callable[[], Any]] = {
            "gen_data": self.gen_data,
            "train": self.train,
            "oracles": self.build_oracles,
            "unlearn_ga": lambda: self.unlearn("ga"),
            "unlearn_rl": lambda: self.unlearn("rl"),
            "unlearn": lambda: self.unlearn(kwargs.get("method", "")),
            "evaluate": self.evaluate,
            "report": self.report,
        }
        if stage not in actions:
            raise ConfigError(f"未知的阶段 {stage!r}")
        logger.info(f"开始阶段: {stage}")
        try:
            result = actions[stage]()
        except StageError:
            raise
        except Exception as e:
            logger.error(f"阶段 {stage} 失败: {e}", exc_info=True)
            raise StageError(stage, e) from e
        self.write_manifest()
        logger.info(f"阶段完成: {stage}")
        return result

    # ------------------------------------------------------------------
    # LangGraph
    # ------------------------------------------------------------------

    def _create_workflow(self) -> StateGraph:
        """创建线性阶段图，每个节点失败时转到 handle_error"""
        workflow = StateGraph(ExperimentState)
        for stage in STAGES:
            workflow.add_node(stage, self._make_node(stage))
        workflow.add_node("handle_error", self._handle_error)
        workflow.set_entry_point(STAGES[0])

        for stage, next_stage in zip(STAGES, STAGES[1:] + (END,)):
            workflow.add_conditional_edges(
                stage,
                self._should_continue,
                {
                    "continue": next_stage,
                    "error": "handle_error"
                }
            )
        workflow.add_edge("handle_error", END)
        return workflow

    def _should_continue(self, state: ExperimentState) -> str:
        """判断是否应该继续执行"""
        if state.get("error_message"):
            return "error"
        return "continue"

    def _make_node(self, stage: str) -> Callable[[ExperimentState], ExperimentState]:
        def node(state: ExperimentState) -> ExperimentState:
            state["current_step"] = stage
            try:
                self.run_stage(stage)
                state["artifacts"] = {**state.get("artifacts", {}), stage: str(self.paths.root)}
                if stage == STAGES[-1]:
                    state["completed"] = True
            except StageError as e:
                self._failure = e
                state["failed_stage"] = stage
                state["error_message"] = str(e)
            return state
        return node

    def _handle_error(self, state: ExperimentState) -> ExperimentState:
        """记录失败阶段，已产生的文件保留在输出目录中"""
        logger.error(f"工作流在阶段 {state.get('failed_stage')} 终止: {state.get('error_message')}")
        state["completed"] = True
        return state

    def run(self) -> ExperimentResult:
        """
        运行完整实验

        Raises:
            StageError: 任一阶段失败
        """
        logger.info(f"开始执行实验工作流，输出目录: {self.paths.root}")
        self.paths.root.mkdir(parents=True, exist_ok=True)
        self._failure = None
        initial_state = ExperimentState(
            output_dir=str(self.paths.root),
            artifacts={},
            current_step="初始化",
            failed_stage="",
            error_message="",
            completed=False
        )
        config_dict = {"configurable": {"thread_id": f"experiment-{self.config_hash[:16]}"}}
        final_state = self.app.invoke(initial_state, config_dict)

        if final_state.get("error_message"):
            if self._failure is not None:
                raise self._failure
            raise StageError(final_state.get("failed_stage", "unknown"), RuntimeError(final_state["error_message"]))

        result = self.load_result()
        logger.info(f"实验工作流执行成功，报告: {self.paths.reports / 'report.md'}")
        return result

    def load_result(self) -> ExperimentResult:
        """从输出目录读取实验结果"""
        reports = read_metrics_csv(_require(self.paths.metrics))
        traces = {m: read_trace(_require(self.paths.unlearn_trace(m)), m,
                                self.config.unlearn_config(m).resolved_threshold(self.config.world.vocab_size))
                  for m in UNLEARN_METHODS}
        checkpoints = {"Original": self.paths.original}
        checkpoints.update({METHOD_LABELS[m]: self.paths.unlearned(m) for m in UNLEARN_METHODS})
        gates = json.loads(self.paths.gates.read_text(encoding="utf-8")) if self.paths.gates.exists() else {}
        result = ExperimentResult(self.paths.root, self.config_hash, reports, traces, checkpoints,
                                  compute_verdicts(reports), gates)
        result.validate()
        return result


def run_experiment(experiment_config: ExperimentConfig) -> ExperimentResult:
    """执行 数据 → 训练 → GA/RL 遗忘 → 评估 → 报告 的完整流程"""
    return ExperimentWorkflow(experiment_config).run()


@dataclass
class SweepResult:
    output_dir: Path
    results: Dict[int, ExperimentResult]
    report_path: Path


def run_sweep(experiment_config: ExperimentConfig, seeds: Sequence[int]) -> SweepResult:
    """对多个主种子分别运行完整实验（各自子目录），汇总均值、标准差与多数判定"""
    if not seeds:
        raise ConfigError("种子列表不能为空")
    base = Path(experiment_config.output.output_dir)
    results = {}
    for seed in seeds:
        logger.info(f"多种子汇总: 运行主种子 {seed}")
        seeded = apply_overrides(experiment_config, {"seed": int(seed), "output.output_dir": str(base / f"seed_{seed}")})
        results[int(seed)] = run_experiment(seeded)
    report_path = ReportGenerator().generate_sweep_report({s: r.reports for s, r in results.items()}, base)
    return SweepResult(base, results, report_path)
