"""
文件工具：项目根目录定位、原子写入与内容摘要。
"""

import hashlib
import json
import os
import sys
import tempfile

from .errors import IoFailure


def get_base_path():
    """
    获取应用程序基础路径

    Returns:
        str: 打包后为可执行文件所在目录，开发环境为项目根目录
    """
    if getattr(sys, "frozen", False):
        return os.path.dirname(sys.executable)
    current_dir = os.path.dirname(os.path.abspath(__file__))
    return os.path.dirname(os.path.dirname(current_dir))


def ensure_directory(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as error:
        raise IoFailure(f"无法创建输出目录 {path}: {error}") from error
    return path


def atomic_write_bytes(path, data):
    """先写同目录临时文件再替换目标，失败时删除临时文件。"""
    directory = os.path.dirname(os.path.abspath(path))
    try:
        file_descriptor, temporary_path = tempfile.mkstemp(prefix=".vsteer-", suffix=".tmp", dir=directory)
    except OSError as error:
        raise IoFailure(f"无法写入 {path}: {error}") from error
    try:
        with os.fdopen(file_descriptor, "wb") as stream:
            stream.write(data)
            stream.flush()
            os.fsync(stream.fileno())
        os.replace(temporary_path, path)
    except OSError as error:
        try:
            os.unlink(temporary_path)
        except OSError:
            pass
        raise IoFailure(f"无法写入 {path}: {error}") from error


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(data):
    """报告使用的稳定 JSON 文本：键排序、缩进固定、末尾换行。"""
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_json(path, data):
    atomic_write_text(path, dump_json(data))


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as stream:
            return json.load(stream)
    except OSError as error:
        raise IoFailure(f"无法读取 {path}: {error}") from error


def write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(_csv_cell(value) for value in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if any(char in text for char in ',"\n') or text != text.strip():
        return '"' + text.replace('"', '""') + '"'
    return text


def sha256_file(path):
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as stream:
            for chunk in iter(lambda: stream.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as error:
        raise IoFailure(f"无法读取 {path}: {error}") from error
    return digest.hexdigest()


def sha256_text(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
