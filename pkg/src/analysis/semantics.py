"""语义嵌入、深度划分、余弦 kNN 聚类与概念对齐的簇选择。"""

from dataclasses import dataclass

import numpy as np

from model.vocab import UNK_ID, fold
from utils.errors import DimensionMismatch, InvalidK, NoMatches, PreconditionError, UnknownConcept, ZeroVector
from utils.numerics import cosine_similarity, l2_normalize, matmul, softmax, to_compute

from .lens import ValueVectorRef, extract_value_vectors, rank_tokens, top_k_matrix


EARLY = "early"
LATE = "late"
FULL = "full"
DEPTH_REGIONS = (EARLY, LATE, FULL)
MUTUAL = "mutual"
UNION = "union"
KNN_RULES = (MUTUAL, UNION)


@dataclass(frozen=True, eq=False)
class SemanticEmbedding:
    owner: tuple
    vector: np.ndarray
    top_tokens: tuple = ()
    max_weight: float = 1.0


@dataclass(frozen=True, eq=False)
class Cluster:
    members: tuple
    centroid: np.ndarray

    @property
    def size(self):
        return len(self.members)


def semantic_embeddings(refs, unembedding, k=5):
    """批量计算语义嵌入：top-k token 的 logits 做 softmax，加权平均对应反嵌入行后归一化。"""
    unembedding = to_compute(unembedding)
    if not 1 <= k <= unembedding.shape[0]:
        raise PreconditionError(f"k={k} 必须位于 [1, {unembedding.shape[0]}]")
    if not refs:
        return []
    vectors = np.stack([to_compute(ref.vector) for ref in refs])
    if vectors.shape[1] != unembedding.shape[1]:
        raise DimensionMismatch(f"价值向量长度 {vectors.shape[1]} 与反嵌入列数 {unembedding.shape[1]} 不一致")
    logits = vectors @ unembedding.T
    top = top_k_matrix(logits, k)
    weights = softmax(np.take_along_axis(logits, top, axis=1), axis=1)
    mixed = np.einsum("nk,nkd->nd", weights, unembedding[top])
    norms = np.sqrt(np.sum(mixed * mixed, axis=1))
    if np.any(norms == 0.0):
        raise ZeroVector("语义嵌入为零向量")
    unit = mixed / norms[:, None]
    return [
        SemanticEmbedding(ref.key, unit[row], tuple(int(token) for token in top[row]), float(weights[row].max()))
        for row, ref in enumerate(refs)
    ]


def semantic_embedding(ref, unembedding, k=5):
    return semantic_embeddings([ref], unembedding, k)[0]


def partition_by_depth(refs, region):
    """early 为前 ⌊N/2⌋ 个引用，late 为其余，full 为全部。"""
    if region not in DEPTH_REGIONS:
        raise PreconditionError(f"未知的深度区域: {region}")
    half = len(refs) // 2
    if region == EARLY:
        return list(refs[:half])
    if region == LATE:
        return list(refs[half:])
    return list(refs)


def similarity_matrix(embs):
    unit = l2_normalize(np.stack([emb.vector for emb in embs]), axis=1)
    return np.clip(matmul(unit, unit.T), -1.0, 1.0)


def knn_neighbors(embs, k):
    """每个嵌入按余弦相似度降序的 k 个近邻下标；相似度相同时按输入顺序。"""
    count = len(embs)
    if not 1 <= k < count:
        raise InvalidK(f"k={k} 必须满足 1 ≤ k < N={count}")
    sims = similarity_matrix(embs)
    np.fill_diagonal(sims, -np.inf)
    order = rank_tokens(sims)
    return order[:, :k], sims


def _knn_edges(neighbors, sims, rule):
    if rule == UNION:
        for i, row in enumerate(neighbors):
            for j in row:
                yield i, int(j)
        return
    radius = sims[np.arange(len(neighbors)), neighbors[:, -1]]
    for i, row in enumerate(neighbors):
        for j in row:
            j = int(j)
            if sims[i, j] >= radius[i] and sims[i, j] >= radius[j]:
                yield i, j


def knn_clusters(embs, k, rule=MUTUAL):
    """近邻关系图的连通分量，簇按最小成员下标排序。

    union：i 与其 k 近邻列表中的每个 j 相连，每个分量至少有 k+1 个成员。
    mutual：仅当 sim(i, j) 同时不低于 i 与 j 各自第 k 近邻的相似度时相连；比较包含相等，
    重复向量不会因下标顺序被拆散。
    """
    if rule not in KNN_RULES:
        raise PreconditionError(f"未知的 kNN 连边规则: {rule}")
    neighbors, sims = knn_neighbors(embs, k)
    count = len(embs)
    parent = list(range(count))

    def find(node):
        while parent[node] != node:
            parent[node] = parent[parent[node]]
            node = parent[node]
        return node

    for i, j in _knn_edges(neighbors, sims, rule):
        root_i, root_j = find(i), find(j)
        if root_i != root_j:
            parent[max(root_i, root_j)] = min(root_i, root_j)

    groups = {}
    for node in range(count):
        groups.setdefault(find(node), []).append(node)
    clusters = []
    for root in sorted(groups, key=lambda key: min(groups[key])):
        members = groups[root]
        mean = np.mean(np.stack([embs[index].vector for index in members]), axis=0)
        try:
            centroid = l2_normalize(mean)
        except ZeroVector:
            centroid = embs[members[0]].vector
        clusters.append(Cluster(tuple(embs[index].owner for index in members), centroid))
    return clusters


def concept_embedding(concept, vocab, unembedding):
    """概念文本分词后，对已知 token 的反嵌入行取平均并归一化。"""
    ids = [token for token in vocab.encode(concept) if token != UNK_ID]
    if not ids:
        raise UnknownConcept(f"概念 {concept!r} 中没有已知 token")
    mean = np.mean(to_compute(unembedding)[ids], axis=0)
    return l2_normalize(mean)


def select_concept_cluster(concept, vocab, unembedding, clusters):
    """返回质心与概念嵌入余弦相似度最大的簇；并列时取下标最小者。"""
    if not clusters:
        raise PreconditionError("簇集合为空")
    target = concept_embedding(concept, vocab, unembedding)
    scores = np.array([cosine_similarity(cluster.centroid, target) for cluster in clusters])
    best = int(np.argmax(scores))
    return clusters[best], float(scores[best])


def keyword_scores(weights, vocab, keywords, pool_k=10):
    """每个价值向量 top-pool_k 投影中命中关键词（折叠后精确匹配）的次数，按 (层, 神经元) 顺序。"""
    cfg = weights.config
    if not 1 <= pool_k <= cfg.vocab_size:
        raise PreconditionError(f"pool_k={pool_k} 必须位于 [1, {cfg.vocab_size}]")
    targets = {fold(word) for word in keywords}
    hit = np.array([fold(surface) in targets for surface in vocab.surfaces])
    scores = []
    for layer in range(cfg.n_layers):
        top = top_k_matrix(weights.compute(f"layers.{layer}.ffn.wd") @ weights.unembedding.T, pool_k)
        scores.append(np.sum(hit[top], axis=1))
    return np.concatenate(scores)


def keyword_select_vectors(weights, vocab, keywords, pool_k=10, count=6, refs=None):
    """得分最高的 count 个价值向量；同分按 (层, 神经元) 顺序。refs 可限定候选范围。"""
    if count < 1:
        raise PreconditionError("count 至少为 1")
    scores = keyword_scores(weights, vocab, keywords, pool_k)
    if not np.any(scores > 0):
        raise NoMatches(f"没有价值向量的投影命中关键词 {sorted(keywords)}")
    all_refs = extract_value_vectors(weights)
    if refs is not None:
        allowed = {ref.key for ref in refs}
        positions = [index for index, ref in enumerate(all_refs) if ref.key in allowed]
    else:
        positions = list(range(len(all_refs)))
    ranked = sorted(positions, key=lambda index: (-int(scores[index]), index))
    return [all_refs[index] for index in ranked[:count]]


def cluster_report(cluster, vocab, unembedding, score=None, top_n=5):
    """簇成员、质心的前 top_n 投影词与选择相似度。"""
    logits = matmul(unembedding, cluster.centroid[:, None])[:, 0]
    top = [int(token) for token in rank_tokens(logits)[:top_n]]
    report = {
        "members": [list(owner) for owner in cluster.members],
        "size": cluster.size,
        "centroid_top_tokens": [vocab.surface(token) for token in top],
    }
    if score is not None:
        report["similarity"] = score
    return report


def weight_uniformity(embs, k=5):
    """softmax 权重最大值的均值；接近 1/k 说明 logits 尺度过小、权重近似均匀。"""
    if not embs:
        return {"mean_max_weight": 0.0, "uniform_weight": 1.0 / k, "near_uniform": True}
    mean_max = float(np.mean([emb.max_weight for emb in embs]))
    return {"mean_max_weight": mean_max, "uniform_weight": 1.0 / k, "near_uniform": mean_max < 1.0 / k + 0.05}


__all__ = [
    "Cluster", "SemanticEmbedding", "ValueVectorRef", "DEPTH_REGIONS", "EARLY", "LATE", "FULL",
    "semantic_embedding", "semantic_embeddings", "partition_by_depth", "knn_neighbors", "knn_clusters",
    "concept_embedding", "select_concept_cluster", "keyword_scores", "KNN_RULES", "MUTUAL", "UNION",
    "keyword_select_vectors", "cluster_report", "weight_uniformity",
]
