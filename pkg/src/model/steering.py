"""FFN 激活覆盖算子（转向干预）。

post-activation 变体把选中神经元的激活直接替换为 α；pre-gate 变体替换门控输入，
等价于 f̃_i = gelu(α)·(W₂x)_i。
"""

import json
from dataclasses import dataclass

import numpy as np

from utils.errors import DimensionMismatch, EmptySet, IndexOutOfRange, PreconditionError
from utils.numerics import gelu, to_compute


POST_ACTIVATION = "post-activation"
PRE_GATE = "pre-gate"
VARIANTS = (POST_ACTIVATION, PRE_GATE)


@dataclass(frozen=True)
class LayerOverride:
    """单层内的覆盖设置。"""

    neurons: tuple
    alpha: float
    variant: str = POST_ACTIVATION


@dataclass(frozen=True)
class InterventionSpec:
    entries: frozenset
    alpha: float
    variant: str = POST_ACTIVATION

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise PreconditionError(f"未知的干预变体: {self.variant}")
        if not np.isfinite(self.alpha):
            raise PreconditionError("α 必须是有限实数")
        object.__setattr__(self, "entries", frozenset((int(layer), int(neuron)) for layer, neuron in self.entries))

    @classmethod
    def empty(cls, alpha=0.0, variant=POST_ACTIVATION):
        return cls(frozenset(), float(alpha), variant)

    def sorted_entries(self):
        return sorted(self.entries)

    def layer_override(self, layer):
        neurons = tuple(sorted(neuron for entry_layer, neuron in self.entries if entry_layer == layer))
        if not neurons:
            return None
        return LayerOverride(neurons, float(self.alpha), self.variant)

    def validate_for(self, cfg):
        for layer, neuron in self.entries:
            if not 0 <= layer < cfg.n_layers or not 0 <= neuron < cfg.d_ffn:
                raise IndexOutOfRange(f"干预位置 ({layer}, {neuron}) 超出模型范围")
        return self

    def to_dict(self):
        return {
            "entries": [[layer, neuron] for layer, neuron in self.sorted_entries()],
            "alpha": self.alpha,
            "variant": self.variant,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(frozenset(tuple(entry) for entry in data["entries"]), float(data["alpha"]), data.get("variant", POST_ACTIVATION))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def make_intervention(refs, alpha, variant=POST_ACTIVATION, cfg=None):
    """由簇成员或价值向量引用构造干预；重复引用只保留一次。"""
    entries = set()
    for ref in refs:
        layer, neuron = (ref.layer, ref.neuron) if hasattr(ref, "layer") else ref
        entries.add((int(layer), int(neuron)))
    if not entries:
        raise EmptySet("干预神经元集合不能为空")
    spec = InterventionSpec(frozenset(entries), float(alpha), variant)
    if cfg is not None:
        spec.validate_for(cfg)
    return spec


def apply_override(f, neurons, alpha, variant, gate_inputs=None):
    """返回覆盖后的激活，未选中的元素保持不变。f 的最后一维是 m。"""
    f = to_compute(f)
    if not neurons:
        return f
    index = np.asarray(neurons, dtype=np.int64)
    if index.min() < 0 or index.max() >= f.shape[-1]:
        raise DimensionMismatch(f"神经元索引超出激活长度 {f.shape[-1]}")
    steered = f.copy()
    if variant == POST_ACTIVATION:
        steered[..., index] = alpha
    elif variant == PRE_GATE:
        if gate_inputs is None:
            raise PreconditionError("pre-gate 变体需要门控输入 (W₁x, W₂x)")
        up = to_compute(gate_inputs[1])
        if up.shape != f.shape:
            raise DimensionMismatch("门控输入与激活形状不一致")
        steered[..., index] = gelu(float(alpha)) * up[..., index]
    else:
        raise PreconditionError(f"未知的干预变体: {variant}")
    return steered


def residual_shift(x, block, neurons, alpha, variant=POST_ACTIVATION):
    """Δx = FFN_steered(x) − FFN(x)。"""
    from .transformer import ffn_apply

    override = LayerOverride(tuple(neurons), float(alpha), variant) if neurons else None
    return ffn_apply(x, block, override) - ffn_apply(x, block, None)


def trace_residual_shifts(weights, tokens, spec):
    """逐层逐位置的 Δx；无干预的层为零向量。"""
    from .transformer import forward

    _logits, trace = forward(weights, tokens, spec, capture=True)
    shifts = []
    for layer in range(weights.config.n_layers):
        block = weights.ffn_block(layer)
        natural = trace.activations[layer] @ to_compute(block.wd)
        steered = trace.steered_activations[layer] @ to_compute(block.wd)
        shifts.append(steered - natural)
    return shifts
