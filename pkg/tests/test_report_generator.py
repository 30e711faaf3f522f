"""
测试报告生成器：表格渲染、趋势判定、指标 CSV 与多种子汇总
"""

import os
import sys

import pytest

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from agents.metric_evaluator import MetricReport
from agents.report_generator import (ReportError, ReportGenerator, compute_verdicts, read_metrics_csv,
                                     render_table, summarize_sweep, verdicts_csv_text, write_metrics_csv)

# 参考结果的数值，仅作为格式与方向的夹具
REFERENCE_VALUES = {
    ("Original", "forget"): (3.334, 1.229, 0.349),
    ("GA", "forget"): (3.866, 1.158, 0.351),
    ("RL", "forget"): (3.875, 1.227, 0.320),
    ("Original", "remain"): (4.905, 1.445, 0.280),
    ("GA", "remain"): (9.458, 1.777, 0.226),
    ("RL", "remain"): (9.933, 1.696, 0.239),
}


# 未见遗忘集沿用遗忘集的参考数值
UNSEEN_VALUES = {(model, "unseen"): values
                 for (model, split), values in REFERENCE_VALUES.items() if split == "forget"}

def make_reports(values=None, seed: int = 0):
    values = values or REFERENCE_VALUES
    return [MetricReport(model, split, fad, kl, clap, 4, 8, 1e-10, seed, "e" * 64, "c" * 64, "d" * 64)
            for (model, split), (fad, kl, clap) in values.items()]


class TestRenderTable:
    """测试结果表格"""

    def setup_method(self):
        """测试前设置"""
        self.reports = make_reports()

    def test_latex_row(self):
        """LaTeX 行保留三位小数"""
        table = render_table(self.reports, "forget", style="latex")
        assert "Original & 3.334 & 1.229 & 0.349 \\\\" in table.splitlines()
        assert table.splitlines()[0] == "Method & FAD (↑) & KL (↑) & CLAP (↓) \\\\"

    def test_markdown_remain_headers(self):
        """保留集表头使用保留集方向"""
        lines = render_table(self.reports, "remain").splitlines()
        assert lines[0] == "| Method | FAD (↓) | KL (↓) | CLAP (↑) |"
        assert lines[-1] == "| RL | 9.933 | 1.696 | 0.239 |"
        assert [line.split(" | ")[0] for line in lines[2:]] == ["| Original", "| GA", "| RL"]

    def test_zero_formatting(self):
        """0 渲染为 0.000"""
        values = dict(REFERENCE_VALUES)
        values[("GA", "forget")] = (0.0, 0.0, 0.0)
        table = render_table(make_reports(values), "forget")
        assert "| GA | 0.000 | 0.000 | 0.000 |" in table

    def test_missing_model(self):
        """缺少某个模型的行"""
        reports = [r for r in self.reports if not (r.model == "RL" and r.split == "remain")]
        with pytest.raises(ReportError):
            render_table(reports, "remain")

    def test_unknown_split_and_style(self):
        """未知划分与未知样式"""
        with pytest.raises(ReportError):
            render_table(self.reports, "holdout")
        with pytest.raises(ReportError):
            render_table(self.reports, "forget", style="html")


class TestVerdicts:
    """测试趋势判定"""

    def test_reference_directions(self):
        """参考数值下全部 12 个单元与期望方向一致"""
        verdicts = compute_verdicts(make_reports())
        assert len(verdicts) == 12
        assert all(v.passed for v in verdicts)
        gated = [(v.method, v.split, v.metric) for v in verdicts if v.gated]
        assert len(gated) == 8
        assert ("GA", "forget", "kl") not in gated
        assert ("RL", "forget", "clap") not in gated
        assert ("RL", "remain", "clap") in gated

    def test_unseen_cells_are_recorded_not_gated(self):
        """有未见遗忘集时共 18 个单元，门控单元仍为 8 个"""
        verdicts = compute_verdicts(make_reports({**REFERENCE_VALUES, **UNSEEN_VALUES}))
        assert len(verdicts) == 18
        unseen = [v for v in verdicts if v.split == "unseen"]
        assert len(unseen) == 6
        assert not any(v.gated for v in unseen)
        assert sum(v.gated for v in verdicts) == 8
        assert all(v.status == "match" for v in unseen)

    def test_missing_required_split(self):
        """缺少保留集指标时报错"""
        reports = [r for r in make_reports() if r.split != "remain"]
        with pytest.raises(ReportError):
            compute_verdicts(reports)

    def test_method_dependent_expectation(self):
        """遗忘集 CLAP 的期望方向随方法不同"""
        verdicts = {(v.method, v.split, v.metric): v for v in compute_verdicts(make_reports())}
        assert verdicts[("GA", "forget", "clap")].expected == "+"
        assert verdicts[("RL", "forget", "clap")].expected == "-"
        assert verdicts[("GA", "forget", "clap")].status == "match"

    def test_failed_gated_cell(self):
        """保留集 FAD 下降时判定失败"""
        values = dict(REFERENCE_VALUES)
        values[("GA", "remain")] = (4.0, 1.777, 0.226)
        verdicts = {(v.method, v.split, v.metric): v for v in compute_verdicts(make_reports(values))}
        cell = verdicts[("GA", "remain", "fad")]
        assert cell.observed == "-"
        assert cell.status == "fail"
        assert cell.delta == pytest.approx(4.0 - 4.905)

    def test_unchanged_metric_has_zero_sign(self):
        """数值不变时观测方向为 0"""
        values = dict(REFERENCE_VALUES)
        values[("RL", "remain")] = REFERENCE_VALUES[("Original", "remain")]
        verdicts = {(v.method, v.split, v.metric): v for v in compute_verdicts(make_reports(values))}
        assert verdicts[("RL", "remain", "kl")].observed == "0"
        assert not verdicts[("RL", "remain", "kl")].passed

    def test_verdict_csv(self):
        """判定 CSV 的表头与行数"""
        lines = verdicts_csv_text(compute_verdicts(make_reports())).splitlines()
        assert lines[0] == "method,split,metric,expected_sign,observed_sign,delta,gated,result"
        assert len(lines) == 13
        assert lines[1].startswith("GA,forget,fad,+,+,")
        assert lines[1].endswith(",true,pass")


class TestMetricsCsv:
    """测试指标 CSV"""

    def test_round_trip(self, tmp_path):
        """写出再读取得到相同的报告，行按划分与模型排序"""
        reports = make_reports()
        path = write_metrics_csv(list(reversed(reports)), tmp_path / "reports" / "metrics.csv")
        loaded = read_metrics_csv(path)
        assert [(r.split, r.model) for r in loaded] == [
            ("forget", "Original"), ("forget", "GA"), ("forget", "RL"),
            ("remain", "Original"), ("remain", "GA"), ("remain", "RL"),
        ]
        assert sorted(loaded, key=lambda r: (r.model, r.split)) == sorted(reports, key=lambda r: (r.model, r.split))

    def test_missing_and_malformed(self, tmp_path):
        """文件不存在或字段无法解析"""
        with pytest.raises(ReportError):
            read_metrics_csv(tmp_path / "absent.csv")
        path = write_metrics_csv(make_reports(), tmp_path / "metrics.csv")
        path.write_text(path.read_text(encoding="utf-8").replace("3.334", "abc"), encoding="utf-8")
        with pytest.raises(ReportError):
            read_metrics_csv(path)


class TestReportGenerator:
    """测试报告渲染"""

    def setup_method(self):
        """测试前设置"""
        self.generator = ReportGenerator()
        self.summary = {
            "config_hash": "f" * 64,
            "seed": 0,
            "format_versions": {"checkpoint": 1, "dataset": 1},
            "gates": {"classifier_accuracy": 0.95, "classifier_passed": True, "encoder_margin": 0.4,
                      "encoder_retrieval": 0.9, "encoder_passed": True},
            "nll": [{"model": "Original", "forget": 0.5, "remain": 1.2}],
            "traces": {"ga": {"steps": 3, "halt_reason": "explosion", "initial_loss": 0.5, "final_loss": 12.5}},
        }

    def test_report_contents(self, tmp_path):
        """报告包含两张表、判定与摘要信息"""
        paths = self.generator.generate_report(make_reports(), self.summary, tmp_path)
        text = paths["report"].read_text(encoding="utf-8")
        assert "| Original | 3.334 | 1.229 | 0.349 |" in text
        assert "| Method | FAD (↓) | KL (↓) | CLAP (↑) |" in text
        assert "门控单元通过 8/8" in text
        assert "f" * 64 in text
        assert "explosion" in text
        assert paths["verdicts"].name == "verdicts.csv"

    def test_report_is_byte_deterministic(self, tmp_path):
        """同样输入两次生成的报告逐字节相同"""
        a = self.generator.generate_report(make_reports(), self.summary, tmp_path / "a")
        b = self.generator.generate_report(make_reports(), self.summary, tmp_path / "b")
        assert a["report"].read_bytes() == b["report"].read_bytes()
        assert a["verdicts"].read_bytes() == b["verdicts"].read_bytes()

    def test_unseen_table_and_nll_column(self, tmp_path):
        """有未见遗忘集时渲染第三张表，负对数似然表增加一列"""
        summary = dict(self.summary, nll=[{"model": "Original", "forget": 0.5, "remain": 1.2, "unseen": 0.7}])
        reports = make_reports({**REFERENCE_VALUES, **UNSEEN_VALUES})
        paths = self.generator.generate_report(reports, summary, tmp_path)
        text = paths["report"].read_text(encoding="utf-8")
        assert "## 未见遗忘集" in text
        assert "| 模型 | 遗忘集 | 保留集 | 未见遗忘集 |\n|---|---|---|---|\n" in text
        assert "| Original | 0.5000 | 1.2000 | 0.7000 |" in text
        assert "门控单元通过 8/8" in text
        assert len(paths["verdicts"].read_text(encoding="utf-8").splitlines()) == 19

    def test_no_unseen_section_without_unseen_split(self, tmp_path):
        """没有未见遗忘集时不渲染对应表格与列"""
        text = self.generator.generate_report(make_reports(), self.summary, tmp_path)["report"].read_text(
            encoding="utf-8")
        assert "未见遗忘集" not in text
        assert "| Original | 0.5000 | 1.2000 |\n" in text

    def test_minimal_summary(self, tmp_path):
        """摘要缺少可选部分时仍能生成"""
        paths = self.generator.generate_report(make_reports(), {}, tmp_path)
        text = paths["report"].read_text(encoding="utf-8")
        assert "评估器质量门限" not in text
        assert "| RL | 3.875 | 1.227 | 0.320 |" in text


class TestSweep:
    """测试多种子汇总"""

    def test_majority(self):
        """三个种子中两个一致即为多数"""
        flipped = dict(REFERENCE_VALUES)
        flipped[("GA", "remain")] = (4.0, 1.777, 0.226)
        runs = [make_reports(seed=0), make_reports(seed=1), make_reports(flipped, seed=2)]
        summary = summarize_sweep(runs)
        verdicts = {(v.method, v.split, v.metric): v for v in summary["verdicts"]}
        cell = verdicts[("GA", "remain", "fad")]
        assert (cell.matches, cell.n) == (2, 3)
        assert cell.majority
        cells = {(c.model, c.split, c.metric): c for c in summary["cells"]}
        assert cells[("Original", "forget", "fad")].std == pytest.approx(0.0, abs=1e-12)
        assert cells[("GA", "remain", "fad")].mean == pytest.approx((9.458 * 2 + 4.0) / 3)

    def test_sweep_report(self, tmp_path):
        """汇总报告与汇总 CSV"""
        path = ReportGenerator().generate_sweep_report({1: make_reports(seed=1), 0: make_reports()}, tmp_path)
        text = path.read_text(encoding="utf-8")
        assert "主种子: 0, 1" in text
        assert (tmp_path / "sweep_metrics.csv").read_text(encoding="utf-8").startswith("model,split,metric,")

    def test_sweep_template_file(self, tmp_path):
        """汇总报告从模板文件渲染"""
        template = tmp_path / "sweep.md.j2"
        template.write_text("seeds={{ seeds | join(',') }} cells={{ cells | length }}\n", encoding="utf-8")
        runs = {0: make_reports({**REFERENCE_VALUES, **UNSEEN_VALUES}),
                1: make_reports({**REFERENCE_VALUES, **UNSEEN_VALUES}, seed=1)}
        path = ReportGenerator(sweep_template_path=template).generate_sweep_report(runs, tmp_path / "out")
        assert path.read_text(encoding="utf-8") == "seeds=0,1 cells=27\n"

    def test_empty_sweep(self):
        """没有运行结果"""
        with pytest.raises(ReportError):
            summarize_sweep([])


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
