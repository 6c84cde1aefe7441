"""模型结构配置。"""

from dataclasses import asdict, dataclass

from utils.errors import PreconditionError


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    vocab_size: int = 228
    max_seq: int = 96
    action_token_range: tuple = (164, 228)
    use_attention: bool = True

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ffn", "n_heads", "vocab_size", "max_seq"):
            value = getattr(self, name)
            if type(value) is not int or value <= 0:
                raise PreconditionError(f"{name} 必须是正整数，当前为 {value!r}")
        if self.d_model % self.n_heads != 0:
            raise PreconditionError(f"d_model={self.d_model} 不能被 n_heads={self.n_heads} 整除")
        if self.d_ffn < self.d_model:
            raise PreconditionError("d_ffn 不能小于 d_model")
        start, stop = self.action_token_range
        if not 0 <= start <= stop <= self.vocab_size:
            raise PreconditionError(f"动作 token 区间 {self.action_token_range} 超出词表范围")
        object.__setattr__(self, "action_token_range", (int(start), int(stop)))

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def is_action(self, token_id):
        start, stop = self.action_token_range
        return start <= token_id < stop

    def to_dict(self):
        data = asdict(self)
        data["action_token_range"] = list(self.action_token_range)
        return data

    @classmethod
    def from_dict(cls, data):
        values = dict(data)
        values["action_token_range"] = tuple(values.get("action_token_range", (164, 228)))
        return cls(**values)
