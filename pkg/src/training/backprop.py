"""掩码交叉熵损失及其对全部参数的反向传播。"""

import numpy as np

from model.transformer import forward_batch
from utils.errors import EmptyBatch, EmptyMask, ShapeMismatch
from utils.numerics import gelu, gelu_grad, softmax


def _outer_sum(upstream, inputs):
    """Σ_{b,t} upstream[b,t,:]ᵀ · inputs[b,t,:]，即按批次与位置累加的外积。"""
    return upstream.reshape(-1, upstream.shape[-1]).T @ inputs.reshape(-1, inputs.shape[-1])


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def masked_cross_entropy(logits, targets, mask):
    """返回 (平均损失, dlogits)。mask 为 0 的位置对损失与梯度都没有贡献。"""
    count = float(mask.sum())
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = -float(np.sum(mask * picked)) / count
    dlogits = softmax(logits, axis=-1)
    index = targets[..., None]
    np.put_along_axis(dlogits, index, np.take_along_axis(dlogits, index, axis=-1) - 1.0, axis=-1)
    dlogits *= (mask / count)[..., None]
    return loss, dlogits


def loss_and_grads(weights, batch, mask=None):
    """掩码平均交叉熵与逐参数梯度（64 位）。"""
    if batch.tokens.size == 0:
        raise EmptyBatch("批次不能为空")
    mask = batch.mask if mask is None else np.asarray(mask, dtype=np.float64)
    if mask.shape != batch.tokens.shape or batch.targets.shape != batch.tokens.shape:
        raise ShapeMismatch("掩码、标签与输入形状必须一致")
    if not np.any(mask > 0):
        raise EmptyMask("掩码没有选中任何位置")
    cfg = weights.config
    logits, _trace, cache = forward_batch(weights, batch.tokens, keep_cache=True)
    loss, dlogits = masked_cross_entropy(logits, batch.targets, mask)

    grads = {}
    grads["unembed"] = _outer_sum(dlogits, cache["hf"])
    dhf = dlogits @ weights.compute("unembed")
    dx, grads["final_ln.gain"], grads["final_ln.bias"] = _layer_norm_backward(
        dhf, weights.compute("final_ln.gain"), cache["ln_final"],
    )

    for layer in reversed(range(cfg.n_layers)):
        prefix = f"layers.{layer}"
        layer_cache = cache["layers"][layer]
        w1 = weights.compute(f"{prefix}.ffn.w1")
        w2 = weights.compute(f"{prefix}.ffn.w2")
        wd = weights.compute(f"{prefix}.ffn.wd")
        h2, pre, up, f = layer_cache["h2"], layer_cache["pre"], layer_cache["up"], layer_cache["f"]
        grads[f"{prefix}.ffn.wd"] = _outer_sum(f, dx)
        df = dx @ wd.T
        dpre = df * up * gelu_grad(pre)
        dup = df * gelu(pre)
        grads[f"{prefix}.ffn.w1"] = _outer_sum(dpre, h2)
        grads[f"{prefix}.ffn.w2"] = _outer_sum(dup, h2)
        dh2 = dpre @ w1 + dup @ w2
        dln2, grads[f"{prefix}.ln2.gain"], grads[f"{prefix}.ln2.bias"] = _layer_norm_backward(
            dh2, weights.compute(f"{prefix}.ln2.gain"), layer_cache["ln2"],
        )
        dx = dx + dln2
        if cfg.use_attention:
            dx = dx + _attention_backward(weights, prefix, layer_cache, dx, grads)

    tokens = cache["tokens"]
    length = tokens.shape[1]
    dtok = np.zeros((cfg.vocab_size, cfg.d_model))
    np.add.at(dtok, tokens.reshape(-1), dx.reshape(-1, cfg.d_model))
    grads["tok_embed"] = dtok
    dpos = np.zeros((cfg.max_seq, cfg.d_model))
    dpos[:length] = dx.sum(axis=0)
    grads["pos_embed"] = dpos
    return loss, grads


def _attention_backward(weights, prefix, layer_cache, dout, grads):
    """返回注意力子层经由 ln1 传回残差流的梯度，并把参数梯度写入 grads。"""
    cfg = weights.config
    batch, length, n = dout.shape
    heads, d_head = cfg.n_heads, cfg.d_head
    wq = weights.compute(f"{prefix}.attn.wq")
    wk = weights.compute(f"{prefix}.attn.wk")
    wv = weights.compute(f"{prefix}.attn.wv")
    wo = weights.compute(f"{prefix}.attn.wo")
    h1, q, k, v = layer_cache["h1"], layer_cache["q"], layer_cache["k"], layer_cache["v"]
    probs, context = layer_cache["probs"], layer_cache["context"]

    grads[f"{prefix}.attn.wo"] = _outer_sum(context, dout)
    dcontext = (dout @ wo.T).reshape(batch, length, heads, d_head).transpose(0, 2, 1, 3)
    dprobs = dcontext @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dcontext
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) / np.sqrt(d_head)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    def merge(heads_grad):
        return heads_grad.transpose(0, 2, 1, 3).reshape(batch, length, n)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    grads[f"{prefix}.attn.wq"] = _outer_sum(h1, dq)
    grads[f"{prefix}.attn.wk"] = _outer_sum(h1, dk)
    grads[f"{prefix}.attn.wv"] = _outer_sum(h1, dv)
    dh1 = dq @ wq.T + dk @ wk.T + dv @ wv.T
    dln1, grads[f"{prefix}.ln1.gain"], grads[f"{prefix}.ln1.bias"] = _layer_norm_backward(
        dh1, weights.compute(f"{prefix}.ln1.gain"), layer_cache["ln1"],
    )
    return dln1
