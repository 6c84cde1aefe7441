"""领域异常定义。"""


class VSteerError(Exception):
    """项目内所有可预期失败的基类。"""


class PreconditionError(VSteerError, ValueError):
    """调用参数不满足操作前置条件。"""


class DimensionMismatch(PreconditionError):
    pass


class EmptyInput(PreconditionError):
    pass


class ZeroVector(PreconditionError):
    pass


class SequenceTooLong(PreconditionError):
    pass


class UnknownToken(PreconditionError):
    pass


class NotAnActionToken(PreconditionError):
    pass


class EmptyBatch(PreconditionError):
    pass


class EmptyMask(PreconditionError):
    pass


class InvalidK(PreconditionError):
    pass


class UnknownConcept(PreconditionError):
    pass


class NoMatches(PreconditionError):
    pass


class EmptySet(PreconditionError):
    pass


class IndexOutOfRange(PreconditionError):
    pass


class InvalidCounts(PreconditionError):
    pass


class DegenerateVariance(PreconditionError):
    pass


class ShapeMismatch(PreconditionError):
    pass


class EmptyCorpus(PreconditionError):
    pass


class EmptyTrace(PreconditionError):
    pass


class TooShort(PreconditionError):
    pass


class WrongLength(PreconditionError):
    pass


class ConfigValidationError(PreconditionError):
    """实验配置与模型不兼容，命令行以退出码 2 结束。"""


class IoFailure(VSteerError, OSError):
    pass


class CheckpointFormatError(VSteerError, ValueError):
    """检查点文件内容不符合格式约定。"""


class BadMagic(CheckpointFormatError):
    pass


class UnsupportedVersion(CheckpointFormatError):
    pass


class ManifestMismatch(CheckpointFormatError):
    pass
