"""
Agent 模块
包含数据集构建、模型训练与采样、遗忘、评估指标、报告生成等 Agent
"""

from .dataset_builder import DatasetBuilder, DatasetSplits, PairedExample, Prompt, WorldSpec
from .ttm_model import ModelParams, TTMModel
from .unlearner import HaltReason, RelabeledExample, Unlearner, UnlearnTrace
from .metric_evaluator import MetricEvaluator, MetricReport, OracleSet
from .report_generator import ReportGenerator

__all__ = [
    'DatasetBuilder',
    'DatasetSplits',
    'PairedExample',
    'Prompt',
    'WorldSpec',
    'ModelParams',
    'TTMModel',
    'HaltReason',
    'RelabeledExample',
    'Unlearner',
    'UnlearnTrace',
    'MetricEvaluator',
    'MetricReport',
    'OracleSet',
    'ReportGenerator'
]
