"""检查点二进制格式。

布局：魔数 b"VLAS"、u32 版本号、u64 头部长度、UTF-8 JSON 头部，随后按清单顺序存放
小端 32 位浮点张量（行优先）。头部包含模型配置、词表、张量清单以及训练元数据。
"""

import json
import struct

import numpy as np

from utils.errors import BadMagic, IoFailure, ManifestMismatch, UnsupportedVersion
from utils.file_utils import atomic_write_bytes

from .config import ModelConfig
from .transformer import TransformerWeights, param_names
from .vocab import TokenVocab


MAGIC = b"VLAS"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_TENSOR_DTYPE = np.dtype("<f4")


def encode_checkpoint(weights, vocab, cfg, metadata=None):
    manifest = []
    blobs = []
    for name in param_names(cfg):
        array = np.ascontiguousarray(weights.param(name), dtype=_TENSOR_DTYPE)
        manifest.append({"name": name, "shape": list(array.shape), "length": int(array.size)})
        blobs.append(array.tobytes(order="C"))
    header = {
        "config": cfg.to_dict(),
        "vocab": vocab.to_dict(),
        "tensors": manifest,
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)


def decode_checkpoint(data):
    """解析检查点字节，返回 (weights, vocab, cfg, metadata)。"""
    if len(data) < _PREFIX.size:
        raise BadMagic("检查点文件过短")
    magic, version, header_length = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"检查点魔数错误: {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"不支持的检查点版本: {version}")
    start = _PREFIX.size
    if start + header_length > len(data):
        raise ManifestMismatch("头部长度超出文件长度")
    try:
        header = json.loads(data[start:start + header_length].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        vocab = TokenVocab.from_dict(header["vocab"])
        manifest = header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as error:
        raise ManifestMismatch(f"检查点头部无法解析: {error}") from error
    expected = param_names(cfg)
    if [entry.get("name") for entry in manifest] != expected:
        raise ManifestMismatch("张量清单与模型配置不一致")
    if len(vocab) != cfg.vocab_size:
        raise ManifestMismatch(f"词表大小 {len(vocab)} 与配置 {cfg.vocab_size} 不一致")
    offset = start + header_length
    params = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        length = int(entry["length"])
        if int(np.prod(shape)) != length:
            raise ManifestMismatch(f"张量 {entry['name']} 的长度 {length} 与形状 {shape} 不一致")
        size = length * _TENSOR_DTYPE.itemsize
        if offset + size > len(data):
            raise ManifestMismatch(f"张量 {entry['name']} 数据不足")
        params[entry["name"]] = np.frombuffer(data, dtype=_TENSOR_DTYPE, count=length, offset=offset).reshape(shape)
        offset += size
    if offset != len(data):
        raise ManifestMismatch(f"检查点末尾有 {len(data) - offset} 字节多余数据")
    try:
        weights = TransformerWeights(cfg, params)
    except ValueError as error:
        raise ManifestMismatch(str(error)) from error
    return weights, vocab, cfg, header.get("metadata", {})


def save_checkpoint(weights, vocab, cfg, path, metadata=None):
    atomic_write_bytes(path, encode_checkpoint(weights, vocab, cfg, metadata))


def load_checkpoint(path, with_metadata=False):
    try:
        with open(path, "rb") as stream:
            data = stream.read()
    except OSError as error:
        raise IoFailure(f"无法读取检查点 {path}: {error}") from error
    weights, vocab, cfg, metadata = decode_checkpoint(data)
    if with_metadata:
        return weights, vocab, cfg, metadata
    return weights, vocab, cfg


def read_header(path):
    """只读取头部，用于 inspect 子命令。"""
    try:
        with open(path, "rb") as stream:
            prefix = stream.read(_PREFIX.size)
            if len(prefix) < _PREFIX.size:
                raise BadMagic("检查点文件过短")
            magic, version, header_length = _PREFIX.unpack(prefix)
            if magic != MAGIC:
                raise BadMagic(f"检查点魔数错误: {magic!r}")
            if version != FORMAT_VERSION:
                raise UnsupportedVersion(f"不支持的检查点版本: {version}")
            raw = stream.read(header_length)
    except OSError as error:
        raise IoFailure(f"无法读取检查点 {path}: {error}") from error
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as error:
        raise ManifestMismatch(f"检查点头部无法解析: {error}") from error
