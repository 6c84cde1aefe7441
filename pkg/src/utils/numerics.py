"""稠密线性代数与基础函数。

存储统一使用 32 位浮点，计算与归约使用 64 位浮点。所有函数均为纯函数，可在线程间共享输入。
"""

import hashlib

import numpy as np
from scipy.special import erf

from .errors import DimensionMismatch, EmptyInput, PreconditionError, ZeroVector


STORAGE_DTYPE = np.float32
COMPUTE_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def to_storage(array):
    """转换为 32 位存储并检查所有元素有限。"""
    stored = np.ascontiguousarray(array, dtype=STORAGE_DTYPE)
    if not np.all(np.isfinite(stored)):
        raise PreconditionError("数组中存在非有限数值")
    return stored


def to_compute(array):
    return np.asarray(array, dtype=COMPUTE_DTYPE)


def matmul(a, b):
    """右乘一个矩阵，按 64 位累加；a 可以是向量，也可以带任意前导批次维。"""
    a = to_compute(a)
    b = to_compute(b)
    if a.ndim == 0 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionMismatch(f"矩阵维度不匹配: {a.shape} × {b.shape}")
    return a @ b


def softmax(v, axis=-1):
    """减去最大值后再求指数，保证数值稳定。"""
    v = to_compute(v)
    if v.size == 0:
        raise EmptyInput("softmax 输入不能为空")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def gelu(x):
    """基于 erf 的精确 GELU：x·Φ(x)。"""
    x = to_compute(x)
    result = x * 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return float(result) if result.ndim == 0 else result


def gelu_grad(x):
    x = to_compute(x)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def layer_norm_stats(v, gain, bias):
    """层归一化，同时返回反向传播需要的 (x̂, 1/σ)。"""
    v = to_compute(v)
    gain = to_compute(gain)
    bias = to_compute(bias)
    if v.shape[-1] != gain.shape[-1] or v.shape[-1] != bias.shape[-1]:
        raise DimensionMismatch(f"层归一化维度不匹配: {v.shape[-1]}, {gain.shape[-1]}, {bias.shape[-1]}")
    if v.shape[-1] < 2:
        raise DimensionMismatch("层归一化要求长度至少为 2")
    centered = v - v.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm(v, gain, bias):
    """对最后一维做零均值单位方差归一化后仿射。"""
    return layer_norm_stats(v, gain, bias)[0]


def cosine_similarity(a, b):
    a = to_compute(a).ravel()
    b = to_compute(b).ravel()
    if a.shape != b.shape:
        raise DimensionMismatch(f"向量长度不匹配: {a.size} 与 {b.size}")
    norm_a = np.sqrt(np.dot(a, a))
    norm_b = np.sqrt(np.dot(b, b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("余弦相似度的输入不能是零向量")
    return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


def l2_normalize(v, axis=-1):
    v = to_compute(v)
    norm = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ZeroVector("无法归一化零向量")
    return v / norm


class SeededStream:
    """以 (seed, stream_id) 为键的计数器随机流。

    同一键在任何调度顺序下产生相同序列；不同键互不影响。
    """

    def __init__(self, seed, stream_id):
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        digest = hashlib.sha256(f"{self.seed}:{self.stream_id}".encode("utf-8")).digest()
        key = int.from_bytes(digest[:16], "little")
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, name):
        return SeededStream(self.seed, f"{self.stream_id}/{name}")

    def normal(self, shape, std=1.0):
        return self.generator.normal(0.0, std, size=shape)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low, high, shape=None):
        return self.generator.integers(low, high, size=shape)

    def choice(self, population, size, replace=False):
        return self.generator.choice(population, size=size, replace=replace)

    def permutation(self, n):
        return self.generator.permutation(n)
