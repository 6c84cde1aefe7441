"""语义嵌入、kNN 聚类与概念对齐选择测试。"""

import sys
import unittest
from pathlib import Path

import numpy as np


PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from analysis.lens import ValueVectorRef, extract_value_vectors
from analysis.semantics import (
    EARLY, FULL, LATE, MUTUAL, UNION, Cluster, SemanticEmbedding, cluster_report, concept_embedding, keyword_select_vectors,
    knn_clusters, knn_neighbors, partition_by_depth, select_concept_cluster, semantic_embeddings, weight_uniformity,
)
from model.config import ModelConfig
from model.transformer import init_weights
from model.vocab import default_vocab
from oracle.plant import default_planted_model
from utils.errors import InvalidK, NoMatches, PreconditionError, UnknownConcept


PLANT_CONFIG = ModelConfig(n_layers=2, d_model=64, d_ffn=64, n_heads=4, max_seq=48)


def embedding(index, vector):
    vector = np.asarray(vector, dtype=np.float64)
    return SemanticEmbedding((0, index), vector / np.linalg.norm(vector))


class EmbeddingTests(unittest.TestCase):
    def test_single_token_embedding_is_its_unembedding_row(self):
        unembedding = np.diag([1.0, 2.0, 3.0, 4.0])
        ref = ValueVectorRef(0, 0, np.array([0.0, 0.0, 1.0, 0.0]))
        emb = semantic_embeddings([ref], unembedding, k=1)[0]
        np.testing.assert_allclose(emb.vector, [0.0, 0.0, 1.0, 0.0])
        self.assertEqual(emb.top_tokens, (2,))
        self.assertEqual(emb.max_weight, 1.0)

    def test_embeddings_are_unit_norm(self):
        weights = init_weights(ModelConfig(n_layers=2, d_model=8, d_ffn=8, n_heads=2, max_seq=32), seed=0)
        refs = [ValueVectorRef(0, index, weights.compute("layers.0.ffn.wd")[index]) for index in range(8)]
        for emb in semantic_embeddings(refs, weights.unembedding, k=5):
            self.assertAlmostEqual(float(np.linalg.norm(emb.vector)), 1.0)
            self.assertEqual(len(emb.top_tokens), 5)

    def test_partition_by_depth(self):
        refs = list(range(5))
        self.assertEqual(partition_by_depth(refs, EARLY), [0, 1])
        self.assertEqual(partition_by_depth(refs, LATE), [2, 3, 4])
        self.assertEqual(partition_by_depth(refs, FULL), refs)
        with self.assertRaises(PreconditionError):
            partition_by_depth(refs, "middle")

    def test_uniformity_of_empty_set(self):
        self.assertTrue(weight_uniformity([], k=5)["near_uniform"])


class KnnTests(unittest.TestCase):
    def test_neighbors_match_brute_force(self):
        rng = np.random.default_rng(1)
        embs = [embedding(index, rng.normal(size=6)) for index in range(50)]
        neighbors, _sims = knn_neighbors(embs, 5)
        matrix = np.stack([emb.vector for emb in embs])
        for i in range(50):
            candidates = sorted((j for j in range(50) if j != i), key=lambda j: (-float(matrix[i] @ matrix[j]), j))
            self.assertEqual(list(neighbors[i]), candidates[:5])

    def test_duplicates_stay_together(self):
        embs = [embedding(index, [1.0, 0.0]) for index in range(3)]
        embs += [embedding(index + 3, [0.0, 1.0]) for index in range(3)]
        clusters = knn_clusters(embs, 1)
        self.assertEqual([cluster.members for cluster in clusters], [
            ((0, 0), (0, 1), (0, 2)),
            ((0, 3), (0, 4), (0, 5)),
        ])
        np.testing.assert_allclose(clusters[1].centroid, [0.0, 1.0])

    def test_clusters_partition_the_input(self):
        rng = np.random.default_rng(2)
        embs = [embedding(index, rng.normal(size=4)) for index in range(30)]
        clusters = knn_clusters(embs, 3)
        members = [owner for cluster in clusters for owner in cluster.members]
        self.assertEqual(sorted(members), [emb.owner for emb in embs])
        firsts = [min(cluster.members) for cluster in clusters]
        self.assertEqual(firsts, sorted(firsts))

    def test_union_rule_joins_every_listed_neighbor(self):
        embs = [embedding(index, [np.cos(angle), np.sin(angle)]) for index, angle in enumerate((0.0, 0.1, 0.5, 2.0, 2.05))]
        neighbors, _sims = knn_neighbors(embs, 1)
        self.assertEqual([int(row[0]) for row in neighbors], [1, 0, 1, 4, 3])
        clusters = knn_clusters(embs, 1, rule=UNION)
        self.assertEqual([cluster.members for cluster in clusters], [((0, 0), (0, 1), (0, 2)), ((0, 3), (0, 4))])

    def test_mutual_rule_drops_one_sided_edges(self):
        embs = [embedding(index, [np.cos(angle), np.sin(angle)]) for index, angle in enumerate((0.0, 0.1, 0.5, 2.0, 2.05))]
        clusters = knn_clusters(embs, 1, rule=MUTUAL)
        self.assertEqual([cluster.members for cluster in clusters], [((0, 0), (0, 1)), ((0, 2),), ((0, 3), (0, 4))])

    def test_union_components_hold_more_than_k_members(self):
        rng = np.random.default_rng(3)
        embs = [embedding(index, rng.normal(size=5)) for index in range(40)]
        for cluster in knn_clusters(embs, 4, rule=UNION):
            self.assertGreaterEqual(cluster.size, 5)

    def test_unknown_rule(self):
        embs = [embedding(index, [1.0, float(index)]) for index in range(4)]
        with self.assertRaises(PreconditionError):
            knn_clusters(embs, 1, rule="directed")

    def test_k_must_be_below_count(self):
        embs = [embedding(index, [1.0, float(index)]) for index in range(4)]
        with self.assertRaises(InvalidK):
            knn_neighbors(embs, 0)
        with self.assertRaises(InvalidK):
            knn_clusters(embs, 4)


class SelectionTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.vocab = default_vocab()
        cls.weights, cls.plant_map = default_planted_model(PLANT_CONFIG, cls.vocab, seed=0)

    def test_unknown_concept(self):
        with self.assertRaises(UnknownConcept):
            concept_embedding("zzqx", self.vocab, self.weights.unembedding)

    def test_cluster_aligned_with_concept_is_selected(self):
        target = concept_embedding("fast", self.vocab, self.weights.unembedding)
        other = concept_embedding("slow", self.vocab, self.weights.unembedding)
        clusters = [Cluster(((0, 1),), other), Cluster(((0, 2),), target)]
        chosen, score = select_concept_cluster("fast", self.vocab, self.weights.unembedding, clusters)
        self.assertIs(chosen, clusters[1])
        self.assertAlmostEqual(score, 1.0)

    def test_tie_selects_lowest_index(self):
        centroid = concept_embedding("slow", self.vocab, self.weights.unembedding)
        clusters = [Cluster(((0, 1),), centroid), Cluster(((0, 2),), centroid.copy())]
        chosen, _score = select_concept_cluster("fast", self.vocab, self.weights.unembedding, clusters)
        self.assertIs(chosen, clusters[0])
        with self.assertRaises(PreconditionError):
            select_concept_cluster("fast", self.vocab, self.weights.unembedding, [])

    def test_keywords_find_planted_neurons(self):
        refs = keyword_select_vectors(self.weights, self.vocab, ["fast"], pool_k=10, count=6)
        self.assertEqual({ref.key for ref in refs}, set(self.plant_map.refs("fast")))

    def test_default_planted_model_recovers_fast_cluster(self):
        weights, plant_map = default_planted_model(ModelConfig(), self.vocab, seed=0)
        embeddings = semantic_embeddings(extract_value_vectors(weights), weights.unembedding)
        planted = set(plant_map.refs("fast"))
        cluster, _score = select_concept_cluster("fast", self.vocab, weights.unembedding, knn_clusters(embeddings, 10))
        self.assertGreaterEqual(len(planted & set(cluster.members)) / cluster.size, 0.8)
        union, _score = select_concept_cluster("fast", self.vocab, weights.unembedding, knn_clusters(embeddings, 10, UNION))
        self.assertGreaterEqual(union.size, 11)
        self.assertLessEqual(len(planted & set(union.members)) / union.size, 6 / 11)
        refs = keyword_select_vectors(weights, self.vocab, ["fast"], pool_k=10, count=6)
        self.assertEqual({ref.key for ref in refs}, planted)

    def test_keywords_without_hits(self):
        cfg = ModelConfig(n_layers=1, d_model=8, d_ffn=8, n_heads=2, max_seq=32)
        unembed = np.zeros((cfg.vocab_size, cfg.d_model))
        unembed[cfg.action_token_range[0], 0] = 1.0
        wd = np.zeros((cfg.d_ffn, cfg.d_model))
        wd[:, 0] = 1.0
        weights = init_weights(cfg, 0).replace({"unembed": unembed, "layers.0.ffn.wd": wd})
        with self.assertRaises(NoMatches):
            keyword_select_vectors(weights, self.vocab, ["fast"], pool_k=1)

    def test_cluster_report_lists_members(self):
        target = concept_embedding("fast", self.vocab, self.weights.unembedding)
        report = cluster_report(Cluster(((1, 4),), target), self.vocab, self.weights.unembedding, 0.5, top_n=3)
        self.assertEqual(report["members"], [[1, 4]])
        self.assertEqual(report["similarity"], 0.5)
        self.assertEqual(len(report["centroid_top_tokens"]), 3)
        self.assertEqual(report["centroid_top_tokens"][0].strip().casefold(), "fast")


if __name__ == "__main__":
    unittest.main()
