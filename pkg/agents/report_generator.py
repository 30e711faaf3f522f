"""
报告生成 Agent
负责指标 CSV 的读写、趋势判定，以及按原表格式渲染 Markdown 报告
"""

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from jinja2 import Template

from agents.metric_evaluator import MODEL_LABELS, REQUIRED_SPLITS, SPLITS, MetricError, MetricReport

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
DEFAULT_TEMPLATE = TEMPLATE_DIR / "report.md.j2"
SWEEP_TEMPLATE = TEMPLATE_DIR / "sweep.md.j2"
METRICS = ("fad", "kl", "clap")
METRIC_TITLES = {"fad": "FAD", "kl": "KL", "clap": "CLAP"}

# 每个划分的期望方向（表头箭头）
SPLIT_ARROWS = {
    "forget": {"fad": "↑", "kl": "↑", "clap": "↓"},
    "remain": {"fad": "↓", "kl": "↓", "clap": "↑"},
    "unseen": {"fad": "↑", "kl": "↑", "clap": "↓"},
}

# (划分, 指标) → (方法 → 期望的变化符号, 是否参与通过判定)
# 遗忘集的 KL 与 CLAP 以及整个未见遗忘集记录的是参考结果中观测到的方向，不参与判定
EXPECTED_SIGNS = {
    ("forget", "fad"): ({"GA": "+", "RL": "+"}, True),
    ("forget", "kl"): ({"GA": "-", "RL": "-"}, False),
    ("forget", "clap"): ({"GA": "+", "RL": "-"}, False),
    ("remain", "fad"): ({"GA": "+", "RL": "+"}, True),
    ("remain", "kl"): ({"GA": "+", "RL": "+"}, True),
    ("remain", "clap"): ({"GA": "-", "RL": "-"}, True),
    ("unseen", "fad"): ({"GA": "+", "RL": "+"}, False),
    ("unseen", "kl"): ({"GA": "-", "RL": "-"}, False),
    ("unseen", "clap"): ({"GA": "+", "RL": "-"}, False),
}


class ReportError(MetricError):
    """报告数据缺失或格式错误"""


# ---------------------------------------------------------------------------
# 指标 CSV
# ---------------------------------------------------------------------------

_REPORT_FIELDS = [f.name for f in fields(MetricReport)]


def metrics_csv_text(reports: Sequence[MetricReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_REPORT_FIELDS)
    for report in sorted(reports, key=_report_order):
        writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(report).values()])
    return buffer.getvalue()


def write_metrics_csv(reports: Sequence[MetricReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_csv_text(reports), encoding="utf-8")
    return path


def read_metrics_csv(path: Union[str, Path]) -> List[MetricReport]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"指标文件不存在: {path}")
    reports = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            try:
                reports.append(MetricReport(
                    model=row["model"], split=row["split"],
                    fad=float(row["fad"]), kl=float(row["kl"]), clap=float(row["clap"]),
                    n_prompts=int(row["n_prompts"]), n_gen=int(row["n_gen"]),
                    q_floor=float(row["q_floor"]), seed=int(row["seed"]),
                    embedder_hash=row["embedder_hash"], classifier_hash=row["classifier_hash"],
                    encoder_hash=row["encoder_hash"],
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise ReportError(f"{path}: 指标行格式错误: {e}") from e
    return reports


def _report_order(report: MetricReport):
    model_rank = MODEL_LABELS.index(report.model) if report.model in MODEL_LABELS else len(MODEL_LABELS)
    return SPLITS.index(report.split), model_rank, report.model


def present_splits(reports: Sequence[MetricReport]) -> List[str]:
    """按固定顺序返回结果中出现的划分；遗忘集与保留集必须存在"""
    seen = {r.split for r in reports}
    missing = [s for s in REQUIRED_SPLITS if s not in seen]
    if missing:
        raise ReportError(f"缺少 {missing[0]} 划分的指标")
    return [s for s in SPLITS if s in seen]


def _lookup(reports: Sequence[MetricReport], model: str, split: str) -> MetricReport:
    for report in reports:
        if report.model == model and report.split == split:
            return report
    raise ReportError(f"缺少 {model} 在 {split} 划分上的指标")


# ---------------------------------------------------------------------------
# 表格与趋势判定
# ---------------------------------------------------------------------------

def render_table(reports: Sequence[MetricReport], split: str, style: str = "markdown") -> str:
    """
    渲染一个划分的 Method / FAD / KL / CLAP 表格，数值保留三位小数

    Args:
        style: markdown 或 latex
    """
    if split not in SPLIT_ARROWS:
        raise ReportError(f"未知的划分 {split!r}")
    arrows = SPLIT_ARROWS[split]
    headers = ["Method"] + [f"{METRIC_TITLES[m]} ({arrows[m]})" for m in METRICS]
    rows = []
    for model in MODEL_LABELS:
        report = _lookup(reports, model, split)
        rows.append([model] + [f"{getattr(report, m):.3f}" for m in METRICS])

    if style == "latex":
        lines = [" & ".join(headers) + r" \\", r"\hline"]
        lines += [" & ".join(row) + r" \\" for row in rows]
    elif style == "markdown":
        lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
    else:
        raise ReportError(f"未知的表格样式 {style!r}")
    return "\n".join(lines)


@dataclass
class TrendVerdict:
    """一个 (方法, 划分, 指标) 单元的方向判定"""
    method: str
    split: str
    metric: str
    expected: str
    observed: str
    delta: float
    gated: bool

    @property
    def passed(self) -> bool:
        return self.observed == self.expected

    @property
    def status(self) -> str:
        if not self.gated:
            return "match" if self.passed else "differ"
        return "pass" if self.passed else "fail"


def _sign(delta: float) -> str:
    if delta > 0:
        return "+"
    if delta < 0:
        return "-"
    return "0"


def compute_verdicts(reports: Sequence[MetricReport]) -> List[TrendVerdict]:
    """
    比较 GA / RL 与 Original 在每个划分、每个指标上的变化方向

    只有遗忘集与保留集时共 12 个单元，有未见遗忘集时 18 个
    """
    verdicts = []
    splits = present_splits(reports)
    for method in ("GA", "RL"):
        for split in splits:
            original = _lookup(reports, "Original", split)
            unlearned = _lookup(reports, method, split)
            for metric in METRICS:
                expected, gated = EXPECTED_SIGNS[(split, metric)]
                delta = getattr(unlearned, metric) - getattr(original, metric)
                verdicts.append(TrendVerdict(method, split, metric, expected[method], _sign(delta), delta, gated))
    return verdicts


def verdicts_csv_text(verdicts: Sequence[TrendVerdict]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["method", "split", "metric", "expected_sign", "observed_sign", "delta", "gated", "result"])
    for v in verdicts:
        writer.writerow([v.method, v.split, v.metric, v.expected, v.observed, repr(v.delta),
                         str(v.gated).lower(), v.status])
    return buffer.getvalue()


# ---------------------------------------------------------------------------
# 多种子汇总
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    model: str
    split: str
    metric: str
    mean: float
    std: float
    n: int


@dataclass
class SweepVerdict:
    method: str
    split: str
    metric: str
    expected: str
    gated: bool
    matches: int
    n: int

    @property
    def majority(self) -> bool:
        return self.matches * 2 > self.n


def summarize_sweep(runs: Sequence[Sequence[MetricReport]]) -> Dict[str, list]:
    """对多个主种子的结果求均值/标准差，并统计每个判定单元与期望一致的次数"""
    if not runs:
        raise ReportError("没有可汇总的运行结果")
    cells = []
    for split in present_splits(runs[0]):
        for model in MODEL_LABELS:
            for metric in METRICS:
                values = [getattr(_lookup(reports, model, split), metric) for reports in runs]
                mean = sum(values) / len(values)
                std = math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1)) if len(values) > 1 else 0.0
                cells.append(SweepCell(model, split, metric, mean, std, len(values)))

    per_run = [compute_verdicts(reports) for reports in runs]
    verdicts = []
    for i, first in enumerate(per_run[0]):
        matches = sum(run[i].passed for run in per_run)
        verdicts.append(SweepVerdict(first.method, first.split, first.metric, first.expected,
                                     first.gated, matches, len(per_run)))
    return {"cells": cells, "verdicts": verdicts}


# ---------------------------------------------------------------------------
# 报告渲染
# ---------------------------------------------------------------------------

class ReportGenerator:
    """报告生成 Agent"""

    def __init__(self, template_path: Optional[Union[str, Path]] = None,
                 sweep_template_path: Optional[Union[str, Path]] = None):
        self.template_path = Path(template_path) if template_path else DEFAULT_TEMPLATE
        self.sweep_template_path = Path(sweep_template_path) if sweep_template_path else SWEEP_TEMPLATE

    def generate_report(self, reports: Sequence[MetricReport], summary: Dict[str, Any],
                        output_dir: Union[str, Path]) -> Dict[str, Path]:
        """
        生成趋势判定 CSV 与 Markdown 报告

        Args:
            reports: 每个 (模型, 划分) 的指标，未见遗忘集可选
            summary: 评估阶段写出的摘要（配置哈希、门限、负对数似然、遗忘轨迹）
            output_dir: 报告目录

        Returns:
            生成的文件路径
        """
        try:
            logger.info("开始生成实验报告")
            output_dir = Path(output_dir)
            output_dir.mkdir(parents=True, exist_ok=True)

            verdicts = compute_verdicts(reports)
            report_data = self._prepare_report_data(reports, verdicts, summary)
            content = self._render_template(self._load_template(), report_data)

            verdict_path = output_dir / "verdicts.csv"
            verdict_path.write_text(verdicts_csv_text(verdicts), encoding="utf-8")
            report_path = self._save_report(content, output_dir / "report.md")
            logger.info(f"实验报告生成完成: {report_path}")
            return {"report": report_path, "verdicts": verdict_path}

        except Exception as e:
            logger.error(f"生成实验报告失败: {e}")
            raise

    def generate_sweep_report(self, runs: Dict[int, Sequence[MetricReport]],
                              output_dir: Union[str, Path]) -> Path:
        """多种子汇总报告"""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        summary = summarize_sweep([runs[seed] for seed in sorted(runs)])

        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["model", "split", "metric", "mean", "std", "n"])
        for c in summary["cells"]:
            writer.writerow([c.model, c.split, c.metric, repr(c.mean), repr(c.std), c.n])
        (output_dir / "sweep_metrics.csv").write_text(buffer.getvalue(), encoding="utf-8")

        data = {
            "seeds": sorted(runs),
            "cells": summary["cells"],
            "verdicts": summary["verdicts"],
            "arrows": SPLIT_ARROWS,
            "titles": METRIC_TITLES,
        }
        content = self._render_template(self._load_template(self.sweep_template_path), data)
        return self._save_report(content, output_dir / "sweep.md")

    def _prepare_report_data(self, reports: Sequence[MetricReport], verdicts: Sequence[TrendVerdict],
                             summary: Dict[str, Any]) -> Dict[str, Any]:
        """准备报告数据"""
        gated = [v for v in verdicts if v.gated]
        splits = present_splits(reports)
        first = _lookup(reports, "Original", "forget")
        return {
            "config_hash": summary.get("config_hash", ""),
            "seed": summary.get("seed", ""),
            "format_versions": summary.get("format_versions", {}),
            "hashes": {
                "embedder": first.embedder_hash,
                "classifier": first.classifier_hash,
                "encoder": first.encoder_hash,
            },
            "n_gen": first.n_gen,
            "q_floor": first.q_floor,
            "forget_table": render_table(reports, "forget"),
            "remain_table": render_table(reports, "remain"),
            "unseen_table": render_table(reports, "unseen") if "unseen" in splits else "",
            "verdicts": verdicts,
            "gated_passed": sum(v.passed for v in gated),
            "gated_total": len(gated),
            "gates": summary.get("gates", {}),
            "nll": summary.get("nll", []),
            "traces": summary.get("traces", {}),
        }

    def _load_template(self, path: Optional[Path] = None) -> str:
        """加载报告模板，默认读取单次实验模板"""
        try:
            with open(path or self.template_path, "r", encoding="utf-8") as f:
                return f.read()
        except Exception as e:
            logger.error(f"加载模板失败: {e}")
            raise

    def _render_template(self, template_content: str, data: Dict[str, Any]) -> str:
        """渲染模板"""
        try:
            template = Template(template_content, trim_blocks=True, lstrip_blocks=True,
                                keep_trailing_newline=True)
            return template.render(**data)
        except Exception as e:
            logger.error(f"模板渲染失败: {e}")
            raise

    def _save_report(self, content: str, path: Path) -> Path:
        """保存报告文件"""
        try:
            path.write_text(content, encoding="utf-8")
            logger.info(f"报告已保存: {path}")
            return path
        except Exception as e:
            logger.error(f"保存报告失败: {e}")
            raise


def load_summary(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"评估摘要不存在: {path}")
    return json.loads(path.read_text(encoding="utf-8"))
