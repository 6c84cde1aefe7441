"""价值向量提取、词空间投影与模式分类。

投影 logits 相同的 token 按 id 升序排列，因此任意 top-k 集合都是确定的。
"""

from dataclasses import dataclass

import numpy as np

from model.vocab import fold
from utils.errors import DimensionMismatch, PreconditionError, WrongLength
from utils.numerics import SeededStream, to_compute


PATTERN_TOP_K = 30
PATTERN_MIN_GROUP = 4
SEMANTIC = "semantic"
NON_SEMANTIC = "non-semantic"
NO_PATTERN = "none"
PATTERN_CATEGORIES = (SEMANTIC, NON_SEMANTIC, NO_PATTERN)


@dataclass(frozen=True, eq=False)
class ValueVectorRef:
    layer: int
    neuron: int
    vector: np.ndarray

    @property
    def key(self):
        return (self.layer, self.neuron)

    def __eq__(self, other):
        return isinstance(other, ValueVectorRef) and self.key == other.key

    def __hash__(self):
        return hash(self.key)


@dataclass(frozen=True)
class TokenProjection:
    """按 logit 降序排列的完整 (token_id, logit) 列表。"""

    token_ids: np.ndarray
    logits: np.ndarray

    def top_ids(self, k):
        return [int(token) for token in self.token_ids[:k]]

    def top(self, k):
        return [(int(token), float(logit)) for token, logit in zip(self.token_ids[:k], self.logits[:k])]

    def top_surfaces(self, vocab, k):
        return [vocab.surface(token) for token in self.top_ids(k)]


def rank_tokens(logits):
    """logit 降序、同值按 id 升序的排列；支持按行批量排序。"""
    return np.argsort(-to_compute(logits), axis=-1, kind="stable")


def extract_value_vectors(weights):
    refs = []
    for layer in range(weights.config.n_layers):
        wd = weights.compute(f"layers.{layer}.ffn.wd")
        for neuron in range(wd.shape[0]):
            refs.append(ValueVectorRef(layer, neuron, wd[neuron]))
    return refs


def project_to_tokens(ref, unembedding):
    vector = to_compute(ref.vector if isinstance(ref, ValueVectorRef) else ref)
    unembedding = to_compute(unembedding)
    if vector.shape[-1] != unembedding.shape[1]:
        raise DimensionMismatch(f"价值向量长度 {vector.shape[-1]} 与反嵌入列数 {unembedding.shape[1]} 不一致")
    logits = unembedding @ vector
    order = rank_tokens(logits)
    return TokenProjection(order, logits[order])


def layer_logits(weights, layer):
    """该层全部价值向量的投影 logits，形状 (m, V)。"""
    return weights.compute(f"layers.{layer}.ffn.wd") @ weights.unembedding.T


def top_k_matrix(logits, k):
    return rank_tokens(logits)[..., :k]


def action_token_fraction_by_layer(weights, k=100, action_range=None):
    """每层价值向量 top-k 投影中动作 token 的平均占比。"""
    cfg = weights.config
    if not 1 <= k <= cfg.vocab_size:
        raise PreconditionError(f"k={k} 必须位于 [1, {cfg.vocab_size}]")
    start, stop = action_range if action_range is not None else cfg.action_token_range
    fractions = []
    for layer in range(cfg.n_layers):
        if stop <= start:
            fractions.append(0.0)
            continue
        top = top_k_matrix(layer_logits(weights, layer), k)
        in_range = (top >= start) & (top < stop)
        fractions.append(float(np.mean(np.sum(in_range, axis=1) / k)))
    return fractions


def _family_index(lexicons):
    index = {}
    for family, words in lexicons.items():
        for word in words:
            index.setdefault(fold(word), set()).add(family)
    return index


def classify_pattern(top30, lexicons):
    """启发式模式分类：语义规则优先于前缀规则。"""
    if len(top30) != PATTERN_TOP_K:
        raise WrongLength(f"需要恰好 {PATTERN_TOP_K} 个 token，实际为 {len(top30)}")
    folded = [fold(surface) for surface in top30]
    surface_counts = {}
    for form in folded:
        if form:
            surface_counts[form] = surface_counts.get(form, 0) + 1
    if surface_counts and max(surface_counts.values()) >= PATTERN_MIN_GROUP:
        return SEMANTIC
    family_counts = {}
    families = _family_index(lexicons)
    for form in folded:
        for family in families.get(form, ()):
            family_counts[family] = family_counts.get(family, 0) + 1
    if family_counts and max(family_counts.values()) >= PATTERN_MIN_GROUP:
        return SEMANTIC
    prefix_counts = {}
    for form in folded:
        if len(form) >= 3:
            prefix_counts[form[:3]] = prefix_counts.get(form[:3], 0) + 1
    if prefix_counts and max(prefix_counts.values()) >= PATTERN_MIN_GROUP:
        return NON_SEMANTIC
    return NO_PATTERN


def survey_sample(cfg, seed, per_layer):
    """每层按种子抽取的神经元下标（升序）。"""
    if not 1 <= per_layer <= cfg.d_ffn:
        raise PreconditionError(f"per_layer={per_layer} 必须位于 [1, {cfg.d_ffn}]")
    return [
        sorted(int(neuron) for neuron in SeededStream(seed, f"survey/{layer}").choice(cfg.d_ffn, per_layer, replace=False))
        for layer in range(cfg.n_layers)
    ]


def pattern_survey(weights, vocab, per_layer=10, seed=0, lexicons=None):
    """每层抽样价值向量，统计三类模式的占比。"""
    lexicons = lexicons if lexicons is not None else vocab.lexicons
    survey = []
    for layer, neurons in enumerate(survey_sample(weights.config, seed, per_layer)):
        top = top_k_matrix(layer_logits(weights, layer)[neurons], PATTERN_TOP_K)
        counts = dict.fromkeys(PATTERN_CATEGORIES, 0)
        labels = []
        for neuron, row in zip(neurons, top):
            label = classify_pattern([vocab.surface(int(token)) for token in row], lexicons)
            counts[label] += 1
            labels.append({"neuron": neuron, "pattern": label})
        survey.append({
            "layer": layer,
            "fractions": {category: counts[category] / len(neurons) for category in PATTERN_CATEGORIES},
            "samples": labels,
        })
    return survey


def survey_rows(survey):
    return [
        (entry["layer"], entry["fractions"][SEMANTIC], entry["fractions"][NON_SEMANTIC], entry["fractions"][NO_PATTERN])
        for entry in survey
    ]
