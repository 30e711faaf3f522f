"""
工具模块
包含自动微分数值内核与张量包文件读写
"""

from .numerics import Tensor, AdamState, adam_step, backward, no_grad, psd_sqrt, sym_eig
from .tensor_io import read_bundle, write_bundle, file_sha256

__all__ = [
    'Tensor',
    'AdamState',
    'adam_step',
    'backward',
    'no_grad',
    'psd_sqrt',
    'sym_eig',
    'read_bundle',
    'write_bundle',
    'file_sha256'
]
