"""仅解码器 Transformer：预归一化残差块、因果多头注意力、GEGLU 前馈层。

前馈层输出按价值向量展开为 Σ_i f_i·w⁽ⁱ⁾，其中 w⁽ⁱ⁾ 是下投影矩阵 Wd 的第 i 行；
转向干预在 f 计算之后、乘以 Wd 之前介入。
"""

from dataclasses import dataclass, field

import numpy as np

from utils.errors import DimensionMismatch, EmptyInput, PreconditionError, SequenceTooLong, UnknownToken
from utils.numerics import COMPUTE_DTYPE, SeededStream, gelu, layer_norm_stats, matmul, softmax, to_compute, to_storage

from .steering import apply_override


@dataclass(frozen=True)
class FfnBlock:
    """一层 GEGLU 前馈参数；三个矩阵均为 m×n，Wd 的行即价值向量。"""

    w1: np.ndarray
    w2: np.ndarray
    wd: np.ndarray

    def __post_init__(self):
        shapes = {self.w1.shape, self.w2.shape, self.wd.shape}
        if len(shapes) != 1 or self.w1.ndim != 2:
            raise DimensionMismatch(f"FFN 矩阵形状不一致: {self.w1.shape}, {self.w2.shape}, {self.wd.shape}")
        for matrix in (self.w1, self.w2, self.wd):
            if not np.all(np.isfinite(matrix)):
                raise PreconditionError("FFN 矩阵中存在非有限数值")

    @property
    def d_ffn(self):
        return self.w1.shape[0]

    @property
    def d_model(self):
        return self.w1.shape[1]


@dataclass
class FfnParts:
    pre: np.ndarray
    up: np.ndarray
    activations: np.ndarray
    steered: np.ndarray
    output: np.ndarray


def ffn_parts(x, block, override=None):
    """计算 GEGLU 前馈的全部中间量；x 的最后一维为 n。"""
    x = to_compute(x)
    if x.shape[-1] != block.d_model:
        raise DimensionMismatch(f"FFN 输入长度 {x.shape[-1]} 与 d_model={block.d_model} 不一致")
    pre = matmul(x, to_compute(block.w1).T)
    up = matmul(x, to_compute(block.w2).T)
    activations = gelu(pre) * up
    if override is None:
        steered = activations
    else:
        steered = apply_override(activations, override.neurons, override.alpha, override.variant, (pre, up))
    return FfnParts(pre, up, activations, steered, matmul(steered, to_compute(block.wd)))


def ffn_apply(x, block, override=None):
    return ffn_parts(x, block, override).output


def param_names(cfg):
    """按固定顺序列出全部参数名；检查点清单与优化器均按此顺序。"""
    names = ["tok_embed", "pos_embed"]
    for layer in range(cfg.n_layers):
        prefix = f"layers.{layer}"
        if cfg.use_attention:
            names += [f"{prefix}.ln1.gain", f"{prefix}.ln1.bias"]
            names += [f"{prefix}.attn.{part}" for part in ("wq", "wk", "wv", "wo")]
        names += [f"{prefix}.ln2.gain", f"{prefix}.ln2.bias"]
        names += [f"{prefix}.ffn.{part}" for part in ("w1", "w2", "wd")]
    names += ["final_ln.gain", "final_ln.bias", "unembed"]
    return names


def param_shape(cfg, name):
    n, m = cfg.d_model, cfg.d_ffn
    if name == "tok_embed" or name == "unembed":
        return (cfg.vocab_size, n)
    if name == "pos_embed":
        return (cfg.max_seq, n)
    if name.endswith(".gain") or name.endswith(".bias"):
        return (n,)
    if ".attn." in name:
        return (n, n)
    if ".ffn." in name:
        return (m, n)
    raise PreconditionError(f"未知参数名: {name}")


class TransformerWeights:
    """不可变的整套模型参数。

    存储精度默认 32 位；梯度校验等需要精确扰动的场景可使用 64 位存储。
    计算用的 64 位副本在构造时一次性生成，多个线程可以共享同一实例。
    """

    def __init__(self, config, params, precision="float32"):
        if precision not in ("float32", "float64"):
            raise PreconditionError(f"不支持的存储精度: {precision}")
        self.config = config
        self.precision = precision
        self._params = {}
        self._compute = {}
        expected = param_names(config)
        missing = [name for name in expected if name not in params]
        if missing:
            raise PreconditionError(f"缺少参数: {', '.join(missing)}")
        for name in expected:
            self._store(name, params[name])

    def _store(self, name, value):
        shape = param_shape(self.config, name)
        if self.precision == "float32":
            array = to_storage(value)
        else:
            array = np.array(value, dtype=COMPUTE_DTYPE)
            if not np.all(np.isfinite(array)):
                raise PreconditionError(f"参数 {name} 中存在非有限数值")
        if array.shape != shape:
            raise DimensionMismatch(f"参数 {name} 形状应为 {shape}，实际为 {array.shape}")
        if array is value:
            array = array.copy()
        array.setflags(write=False)
        self._params[name] = array
        compute = array if self.precision == "float64" else np.array(array, dtype=COMPUTE_DTYPE)
        compute.setflags(write=False)
        self._compute[name] = compute

    @property
    def names(self):
        return list(self._params)

    def param(self, name):
        return self._params[name]

    def compute(self, name):
        return self._compute[name]

    def items(self):
        return self._params.items()

    @property
    def unembedding(self):
        return self._compute["unembed"]

    def ffn_block(self, layer):
        if not 0 <= layer < self.config.n_layers:
            raise PreconditionError(f"层索引 {layer} 超出范围")
        prefix = f"layers.{layer}.ffn"
        return FfnBlock(self._params[f"{prefix}.w1"], self._params[f"{prefix}.w2"], self._params[f"{prefix}.wd"])

    def replace(self, updates):
        """返回替换部分参数后的新实例，原实例不变；未替换的数组直接共享。"""
        clone = object.__new__(TransformerWeights)
        clone.config = self.config
        clone.precision = self.precision
        clone._params = dict(self._params)
        clone._compute = dict(self._compute)
        for name, value in updates.items():
            if name not in clone._params:
                raise PreconditionError(f"未知参数名: {name}")
            clone._store(name, value)
        return clone

    def as_precision(self, precision):
        return TransformerWeights(self.config, dict(self._params), precision)


def init_weights(cfg, seed, std=0.02, gate_gain=0.0):
    """缩放高斯初始化；归一化增益为 1、偏置为 0。

    gate_gain > 0 时 FFN 的 W₁/W₂ 改用标准差 gate_gain/√d_model，使门控输入与上投影
    的逐元素尺度约为 gate_gain，自然激活与转向系数 α 处于同一量级。
    """
    if std <= 0 or gate_gain < 0:
        raise PreconditionError("初始化标准差必须为正，gate_gain 不能为负")
    gate_std = gate_gain / np.sqrt(cfg.d_model) if gate_gain > 0 else std
    stream = SeededStream(seed, "init")
    params = {}
    for name in param_names(cfg):
        shape = param_shape(cfg, name)
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        elif name.endswith(".ffn.w1") or name.endswith(".ffn.w2"):
            params[name] = stream.child(name).normal(shape, gate_std)
        else:
            params[name] = stream.child(name).normal(shape, std)
    return TransformerWeights(cfg, params)



@dataclass
class ActivationTrace:
    """逐层逐位置的 FFN 输入与激活，以及最终 logits。"""

    ffn_inputs: list = field(default_factory=list)
    activations: list = field(default_factory=list)
    steered_activations: list = field(default_factory=list)
    logits: np.ndarray = None


def check_tokens(cfg, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise EmptyInput("token 序列不能为空")
    if tokens.shape[1] > cfg.max_seq:
        raise SequenceTooLong(f"序列长度 {tokens.shape[1]} 超过 max_seq={cfg.max_seq}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise UnknownToken("token id 必须是整数")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise UnknownToken(f"token id 超出词表范围 [0, {cfg.vocab_size})")
    return tokens.astype(np.int64)


def _causal_mask(length):
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def _attention(weights, prefix, h, cache):
    cfg = weights.config
    batch, length, n = h.shape
    heads, d_head = cfg.n_heads, cfg.d_head
    q = matmul(h, weights.compute(f"{prefix}.attn.wq")).reshape(batch, length, heads, d_head).transpose(0, 2, 1, 3)
    k = matmul(h, weights.compute(f"{prefix}.attn.wk")).reshape(batch, length, heads, d_head).transpose(0, 2, 1, 3)
    v = matmul(h, weights.compute(f"{prefix}.attn.wv")).reshape(batch, length, heads, d_head).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d_head)
    scores = np.where(_causal_mask(length), -np.inf, scores)
    probs = softmax(scores, axis=-1)
    context = (probs @ v).transpose(0, 2, 1, 3).reshape(batch, length, n)
    if cache is not None:
        cache.update(h1=h, q=q, k=k, v=v, probs=probs, context=context)
    return matmul(context, weights.compute(f"{prefix}.attn.wo"))


def forward_batch(weights, tokens, intervention=None, capture=False, keep_cache=False):
    """批量前向；tokens 形状为 (B, T)。返回 (logits, trace, cache)。"""
    cfg = weights.config
    tokens = check_tokens(cfg, tokens)
    if intervention is not None:
        intervention.validate_for(cfg)
    length = tokens.shape[1]
    x = weights.compute("tok_embed")[tokens] + weights.compute("pos_embed")[:length]
    trace = ActivationTrace() if capture else None
    cache = {"tokens": tokens, "layers": []} if keep_cache else None
    for layer in range(cfg.n_layers):
        prefix = f"layers.{layer}"
        layer_cache = {} if keep_cache else None
        if cfg.use_attention:
            h1, ln1 = layer_norm_stats(x, weights.compute(f"{prefix}.ln1.gain"), weights.compute(f"{prefix}.ln1.bias"))
            x = x + _attention(weights, prefix, h1, layer_cache)
            if keep_cache:
                layer_cache["ln1"] = ln1
        h2, ln2 = layer_norm_stats(x, weights.compute(f"{prefix}.ln2.gain"), weights.compute(f"{prefix}.ln2.bias"))
        override = intervention.layer_override(layer) if intervention is not None else None
        parts = ffn_parts(h2, weights.ffn_block(layer), override)
        x = x + parts.output
        if keep_cache:
            layer_cache.update(ln2=ln2, h2=h2, pre=parts.pre, up=parts.up, f=parts.steered)
            cache["layers"].append(layer_cache)
        if capture:
            trace.ffn_inputs.append(h2)
            trace.activations.append(parts.activations)
            trace.steered_activations.append(parts.steered)
    hf, ln_final = layer_norm_stats(x, weights.compute("final_ln.gain"), weights.compute("final_ln.bias"))
    logits = matmul(hf, weights.compute("unembed").T)
    if keep_cache:
        cache.update(ln_final=ln_final, hf=hf)
    if capture:
        trace.logits = logits
    return logits, trace, cache


def forward(weights, tokens, intervention=None, capture=False):
    """单序列前向；返回每个位置的 logits (T, V) 与可选的激活记录。"""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise PreconditionError("forward 只接受一维 token 序列")
    logits, trace, _cache = forward_batch(weights, tokens, intervention, capture=capture)
    if trace is not None:
        trace.ffn_inputs = [item[0] for item in trace.ffn_inputs]
        trace.activations = [item[0] for item in trace.activations]
        trace.steered_activations = [item[0] for item in trace.steered_activations]
        trace.logits = logits[0]
    return logits[0], trace
