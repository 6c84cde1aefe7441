"""检查点之间的价值向量对比：token 出现次数表、双比例 z 检验与动作 token 专门化程度。"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from model.vocab import UNK_ID
from utils.errors import EmptyCorpus, PreconditionError, ShapeMismatch
from utils.file_utils import write_csv, write_json
from utils.stats import two_proportion_z

from .lens import layer_logits, top_k_matrix


@dataclass(frozen=True)
class TokenCountTable:
    """每个 token 出现在多少个价值向量的 top-k 投影中（每个向量至多计 1 次）。"""

    counts: np.ndarray
    total_vectors: int
    k: int

    @property
    def slots(self):
        return self.total_vectors * self.k

    def count(self, token_id):
        return int(self.counts[token_id])


def _layer_presence(weights, layer, k):
    top = top_k_matrix(layer_logits(weights, layer), k)
    return np.bincount(top.reshape(-1), minlength=weights.config.vocab_size)


def token_occurrence_counts(weights, k=100, workers=1):
    cfg = weights.config
    if not 1 <= k <= cfg.vocab_size:
        raise PreconditionError(f"k={k} 必须位于 [1, {cfg.vocab_size}]")
    layers = range(cfg.n_layers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            per_layer = list(executor.map(lambda layer: _layer_presence(weights, layer, k), layers))
    else:
        per_layer = [_layer_presence(weights, layer, k) for layer in layers]
    counts = np.sum(per_layer, axis=0).astype(np.int64)
    return TokenCountTable(counts, cfg.n_layers * cfg.d_ffn, k)


@dataclass
class DiffReport:
    """逐 token 的 (count_a, count_b, z)，以及按 z 的降序/升序排名。"""

    counts_a: np.ndarray
    counts_b: np.ndarray
    z: np.ndarray
    k: int
    total_vectors: int
    concentration_a: float
    concentration_b: float

    @property
    def ranked_up(self):
        return [int(token) for token in np.argsort(-self.z, kind="stable")]

    @property
    def ranked_down(self):
        return [int(token) for token in np.argsort(self.z, kind="stable")]

    def top_abs(self, n):
        return [int(token) for token in np.argsort(-np.abs(self.z), kind="stable")[:n]]

    def rows(self, vocab):
        return [
            (vocab.surface(token), int(self.counts_a[token]), int(self.counts_b[token]), float(self.z[token]))
            for token in range(len(self.z))
        ]

    def to_dict(self, vocab, top_n=20):
        def describe(tokens):
            return [{"token": vocab.surface(token), "id": token, "z": float(self.z[token])} for token in tokens[:top_n]]

        return {
            "k": self.k,
            "total_vectors": self.total_vectors,
            "action_concentration": {"a": self.concentration_a, "b": self.concentration_b},
            "up_weighted": describe(self.ranked_up),
            "down_weighted": describe(self.ranked_down),
            "tokens": [
                {"token": surface, "count_a": count_a, "count_b": count_b, "z": z}
                for surface, count_a, count_b, z in self.rows(vocab)
            ],
        }

    def save(self, json_path, csv_path, vocab):
        write_json(json_path, self.to_dict(vocab))
        write_csv(csv_path, ("token", "count_a", "count_b", "z"), self.rows(vocab))


def _check_compatible(a, b):
    if a.config != b.config:
        raise ShapeMismatch("两个检查点的模型配置不一致")


def diff_checkpoints(a, b, k=100, workers=1):
    """z 为 b 相对 a 的提升；每个模型的样本量为全部 top-k 槽位数。"""
    _check_compatible(a, b)
    table_a = token_occurrence_counts(a, k, workers)
    table_b = token_occurrence_counts(b, k, workers)
    slots = table_a.slots
    z = np.array([
        two_proportion_z(int(count_b), slots, int(count_a), slots)
        for count_a, count_b in zip(table_a.counts, table_b.counts)
    ])
    action_range = a.config.action_token_range
    return DiffReport(
        counts_a=table_a.counts,
        counts_b=table_b.counts,
        z=z,
        k=k,
        total_vectors=table_a.total_vectors,
        concentration_a=action_token_concentration(table_a, action_range),
        concentration_b=action_token_concentration(table_b, action_range),
    )


def action_token_concentration(table, action_range):
    """动作 token 计数分布的香农熵除以 ln(动作 token 数)；动作总数为 0 时约定为 1。"""
    start, stop = action_range
    if stop <= start:
        raise PreconditionError("动作 token 区间不能为空")
    if stop - start == 1:
        return 1.0
    counts = np.asarray(table.counts[start:stop], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return 1.0
    probs = counts[counts > 0] / total
    entropy = -float(np.sum(probs * np.log(probs)))
    return min(1.0, max(0.0, entropy / math.log(stop - start)))


def instruction_token_analysis(instructions, a, b, vocab, top_n=200, k=100):
    """对指令语料中最常见的 top_n 个 token 比较两个检查点的出现次数。

    返回逐 token 的 z 与计数比 (count_b+1)/(count_a+1)，以及二者的均值。
    """
    _check_compatible(a, b)
    frequency = {}
    for text in instructions:
        for token in vocab.encode(text):
            if token != UNK_ID:
                frequency[token] = frequency.get(token, 0) + 1
    if not frequency:
        raise EmptyCorpus("指令语料分词后为空")
    if top_n < 1:
        raise PreconditionError("top_n 至少为 1")
    ranked = sorted(frequency, key=lambda token: (-frequency[token], token))[:top_n]
    table_a = token_occurrence_counts(a, k)
    table_b = token_occurrence_counts(b, k)
    slots = table_a.slots
    entries = []
    for token in ranked:
        count_a, count_b = table_a.count(token), table_b.count(token)
        entries.append({
            "token": vocab.surface(token),
            "frequency": frequency[token],
            "count_a": count_a,
            "count_b": count_b,
            "z": two_proportion_z(count_b, slots, count_a, slots),
            "ratio": (count_b + 1) / (count_a + 1),
        })
    return {
        "k": k,
        "top_n": len(entries),
        "mean_z": float(np.mean([entry["z"] for entry in entries])),
        "mean_ratio": float(np.mean([entry["ratio"] for entry in entries])),
        "tokens": entries,
    }


def instruction_rows(analysis):
    return [
        (entry["token"], entry["frequency"], entry["count_a"], entry["count_b"], entry["z"], entry["ratio"])
        for entry in analysis["tokens"]
    ]
