"""
张量包文件读写
格式：一行 JSON 头（格式版本、类型、头信息），随后是若干命名张量块；
每个块由一行 JSON（name, shape）加上小端 float64 原始字节组成
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class TensorBundleError(Exception):
    """张量包格式错误"""


def _dumps(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def write_bundle(path: Union[str, Path], kind: str, header: Mapping[str, Any],
                 tensors: Mapping[str, np.ndarray]) -> str:
    """
    写入张量包，张量按名称排序保证字节级确定性

    Returns:
        文件的 sha256
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(tensors)
    with open(path, "wb") as f:
        f.write(_dumps({
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "header": dict(header),
            "count": len(names),
        }))
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
            f.write(_dumps({"name": name, "shape": list(arr.shape)}))
            f.write(arr.tobytes())
    digest = file_sha256(path)
    logger.debug(f"张量包已写入: {path} ({len(names)} 个张量, sha256={digest[:12]})")
    return digest


def read_bundle(path: Union[str, Path],
                expected_kind: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """读取张量包，返回 (头信息, 张量字典)"""
    path = Path(path)
    with open(path, "rb") as f:
        try:
            meta = json.loads(f.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise TensorBundleError(f"{path}: 头信息无法解析: {e}") from e
        if meta.get("format_version") != FORMAT_VERSION:
            raise TensorBundleError(f"{path}: 不支持的格式版本 {meta.get('format_version')}")
        if expected_kind is not None and meta.get("kind") != expected_kind:
            raise TensorBundleError(f"{path}: 文件类型为 {meta.get('kind')}，期望 {expected_kind}")

        tensors: Dict[str, np.ndarray] = {}
        for _ in range(int(meta["count"])):
            try:
                block = json.loads(f.readline().decode("utf-8"))
                shape = tuple(int(d) for d in block["shape"])
                name = block["name"]
            except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
                raise TensorBundleError(f"{path}: 张量块头无法解析: {e}") from e
            nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
            raw = f.read(nbytes)
            if len(raw) != nbytes:
                raise TensorBundleError(f"{path}: 张量 {name} 数据截断")
            tensors[name] = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64).reshape(shape)
        if f.read(1):
            raise TensorBundleError(f"{path}: 文件末尾存在多余数据")
    return meta["header"], tensors


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tensors_sha256(tensors: Mapping[str, np.ndarray]) -> str:
    """与文件无关的张量内容哈希（名称、形状、字节）"""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=_DTYPE)
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.shape).encode("ascii"))
        digest.update(arr.tobytes())
    return digest.hexdigest()
