"""两阶段训练：语言预训练与动作模仿微调，以及有限差分梯度校验。"""

from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from model.transformer import forward_batch, param_names
from model.vocab import PAD_ID
from utils.errors import EmptyBatch, EmptyMask, PreconditionError
from utils.numerics import SeededStream

from .backprop import loss_and_grads, masked_cross_entropy
from .corpus import make_batch


ALL_POSITIONS = "all-positions"
ACTION_POSITIONS = "action-positions-only"
MASK_POLICIES = (ALL_POSITIONS, ACTION_POSITIONS)


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 3e-4
    batch_size: int = 32
    steps: int = 3000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stage: str = "pretrain"

    def __post_init__(self):
        if not self.lr > 0 or not self.eps > 0:
            raise PreconditionError("学习率与 eps 必须为正")
        if self.batch_size < 1 or self.steps < 0:
            raise PreconditionError("batch_size 必须为正，steps 不能为负")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise PreconditionError("动量系数必须位于 (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


PRETRAIN_DEFAULTS = Hyperparams(lr=3e-4, steps=1500, stage="pretrain")
FINETUNE_DEFAULTS = Hyperparams(lr=3e-4, steps=1000, stage="finetune")


def mask_function(cfg, mask_policy):
    if mask_policy == ALL_POSITIONS:
        return lambda target: target != PAD_ID
    if mask_policy == ACTION_POSITIONS:
        return cfg.is_action
    raise PreconditionError(f"未知的掩码策略: {mask_policy}")


class AdamState:
    """Adam 一阶与二阶矩；参数以 64 位主副本更新。"""

    def __init__(self, weights, hp):
        self.hp = hp
        self.step = 0
        self.params = {name: np.array(weights.compute(name)) for name in weights.names}
        self.m = {name: np.zeros_like(value) for name, value in self.params.items()}
        self.v = {name: np.zeros_like(value) for name, value in self.params.items()}

    def update(self, grads):
        self.step += 1
        hp = self.hp
        correction1 = 1.0 - hp.beta1 ** self.step
        correction2 = 1.0 - hp.beta2 ** self.step
        for name in self.params:
            grad = grads[name]
            self.m[name] = hp.beta1 * self.m[name] + (1.0 - hp.beta1) * grad
            self.v[name] = hp.beta2 * self.v[name] + (1.0 - hp.beta2) * grad * grad
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            self.params[name] = self.params[name] - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
        return self.params


def sample_batch(sequences, hp, step, mask_fn):
    """按 (seed, 阶段, 步号) 抽取批次，与线程调度无关。"""
    stream = SeededStream(hp.seed, f"train/{hp.stage}/{step}")
    size = min(hp.batch_size, len(sequences))
    rows = stream.choice(len(sequences), size, replace=False)
    return make_batch([sequences[int(row)] for row in rows], mask_fn)


def train_stage(weights, sequences, hp, mask_policy, loss_sink=None, progress=False):
    """在给定序列上训练 hp.steps 步并返回新权重；每步损失交给 loss_sink(step, loss)。"""
    if hp.steps == 0:
        return weights
    if not sequences:
        raise EmptyBatch("训练数据为空")
    mask_fn = mask_function(weights.config, mask_policy)
    if not any(mask_fn(token) for sequence in sequences for token in sequence[1:]):
        raise EmptyMask(f"训练数据中没有满足掩码策略 {mask_policy} 的位置")
    current = weights.as_precision("float64")
    optimizer = AdamState(current, hp)
    bar = tqdm(range(hp.steps), desc=hp.stage, disable=not progress, leave=False)
    for step in bar:
        batch = sample_batch(sequences, hp, step, mask_fn)
        if not np.any(batch.mask > 0):
            continue
        loss, grads = loss_and_grads(current, batch)
        current = current.replace(optimizer.update(grads))
        if loss_sink is not None:
            loss_sink(step, loss)
        if progress and step % 50 == 0:
            bar.set_postfix(loss=f"{loss:.4f}")
    return current.as_precision("float32")


class LossCurve:
    """训练损失记录；提供 LogWriter 时同时写出 step,loss 两列 CSV。"""

    def __init__(self, writer=None, path=None, generation=None):
        self.points = []
        self.writer = writer
        self.generation = generation
        if writer is not None and path is not None:
            writer.open(path, generation, header=("step", "loss"))

    def __call__(self, step, loss):
        self.points.append((step, loss))
        if self.writer is not None:
            self.writer.write_row((step, float(loss)), self.generation)

    def close(self):
        if self.writer is not None:
            self.writer.close(self.generation)

    def final_loss(self, window=50):
        if not self.points:
            return float("nan")
        tail = [loss for _step, loss in self.points[-window:]]
        return float(np.mean(tail))


def batch_loss(weights, batch):
    logits, _trace, _cache = forward_batch(weights, batch.tokens)
    loss, _dlogits = masked_cross_entropy(logits, batch.targets, batch.mask)
    return loss


def action_accuracy(weights, sequences, batch_size=64):
    """动作位置上的下一 token 准确率（全词表 argmax）。"""
    correct = 0
    total = 0
    cfg = weights.config
    for start in range(0, len(sequences), batch_size):
        batch = make_batch(sequences[start:start + batch_size], cfg.is_action)
        logits, _trace, _cache = forward_batch(weights, batch.tokens)
        predicted = np.argmax(logits, axis=-1)
        selected = batch.mask > 0
        correct += int(np.sum(predicted[selected] == batch.targets[selected]))
        total += int(np.sum(selected))
    if total == 0:
        raise EmptyMask("序列中没有动作位置")
    return correct / total


def finite_diff_check(weights, batch, epsilon=1e-3, fraction=0.01, seed=0, floor=1e-8):
    """解析梯度与中心差分对比，返回抽样参数上的最大相对误差。

    相对误差为 |a - n| / max(|a|, |n|, floor)；floor 只让两者都严格为零的参数记为零误差。
    所有计算在 64 位存储的权重副本上进行。
    """
    if not 0.0 < epsilon <= 0.1:
        raise PreconditionError(f"ε 必须位于 (0, 0.1]，当前为 {epsilon}")
    exact = weights.as_precision("float64")
    _loss, grads = loss_and_grads(exact, batch)
    names = param_names(exact.config)
    sizes = [exact.param(name).size for name in names]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    count = max(1, int(round(fraction * total)))
    picks = np.sort(SeededStream(seed, "finite-diff").choice(total, count, replace=False))
    worst = 0.0
    for flat in picks:
        position = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[position]
        index = np.unravel_index(int(flat - offsets[position]), exact.param(name).shape)
        base = np.array(exact.param(name))
        plus = base.copy()
        plus[index] += epsilon
        minus = base.copy()
        minus[index] -= epsilon
        numeric = (batch_loss(exact.replace({name: plus}), batch) - batch_loss(exact.replace({name: minus}), batch)) / (2.0 * epsilon)
        analytic = float(grads[name][index])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, error)
    return worst
