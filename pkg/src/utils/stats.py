"""检查点对比与转向实验使用的统计量。"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sp_stats

from .errors import DegenerateVariance, InvalidCounts, PreconditionError


_MIN_P = np.finfo(float).tiny


@dataclass(frozen=True)
class PairedSamples:
    first: tuple
    second: tuple

    def __post_init__(self):
        if len(self.first) != len(self.second):
            raise PreconditionError("配对样本长度必须相同")
        if len(self.first) < 2:
            raise PreconditionError("配对样本至少需要 2 对")
        values = np.asarray(self.first + self.second, dtype=float)
        if not np.all(np.isfinite(values)):
            raise PreconditionError("配对样本中存在非有限数值")

    @classmethod
    def of(cls, first, second):
        return cls(tuple(float(value) for value in first), tuple(float(value) for value in second))

    def differences(self):
        return np.asarray(self.first, dtype=float) - np.asarray(self.second, dtype=float)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int


def two_proportion_z(x1, n1, x2, n2):
    """合并比例的双比例 z 统计量；合并比例为 0 或 1 时约定返回 0。"""
    if n1 <= 0 or n2 <= 0 or x1 < 0 or x2 < 0 or x1 > n1 or x2 > n2:
        raise InvalidCounts(f"计数不合法: x1={x1}, n1={n1}, x2={x2}, n2={n2}")
    pooled = (x1 + x2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        return 0.0
    standard_error = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    return (x1 / n1 - x2 / n2) / standard_error


def paired_t_test(samples):
    """配对 t 检验，p 值取自 t 分布双侧生存函数。"""
    differences = samples.differences()
    n = differences.size
    sd = float(np.std(differences, ddof=1))
    if sd == 0.0:
        raise DegenerateVariance("配对差值方差为 0")
    t = float(np.mean(differences)) / (sd / math.sqrt(n))
    df = n - 1
    p = float(2.0 * sp_stats.t.sf(abs(t), df))
    return TTestResult(t=t, p=min(1.0, max(p, _MIN_P)), df=df)


def cohens_d(a, b):
    """两组均值差除以合并标准差（样本方差使用 n-1）。"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 2 or b.size < 2:
        raise PreconditionError("每组至少需要 2 个样本")
    pooled_var = ((a.size - 1) * np.var(a, ddof=1) + (b.size - 1) * np.var(b, ddof=1)) / (a.size + b.size - 2)
    if pooled_var <= 0.0:
        raise DegenerateVariance("合并方差为 0")
    return float((np.mean(a) - np.mean(b)) / math.sqrt(pooled_var))
