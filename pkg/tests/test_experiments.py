"""转向实验运行器测试：报告结构、确定性与附表输出。"""

import os
import sys
import tempfile
import unittest
from pathlib import Path


PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from experiments.config import ExperimentConfig
from experiments.runner import (
    build_tasks, compare, experiment_baselines, experiment_depth, experiment_speed_sweep, random_refs,
)
from model.config import ModelConfig
from model.vocab import default_vocab
from oracle.plant import default_planted_model
from sim.environment import SPEED_TASK_PROMPTS, make_task
from utils.app_info import AppInfo
from utils.errors import ConfigValidationError
from utils.file_utils import dump_json


PLANT_CONFIG = ModelConfig(n_layers=2, d_model=64, d_ffn=64, n_heads=4, max_seq=48)
SMALL_RUN = {
    "model": {"n_layers": 2, "d_model": 64, "d_ffn": 64, "n_heads": 4, "max_seq": 48},
    "rollouts_per_cell": 2,
    "baseline_rollouts": 2,
    "alphas": [0.0, 10.0],
    "cluster_sizes": [6],
    "knn_k": [5],
    "baseline_size": 6,
    "data": {"horizon": 6},
}
PROVENANCE = {"planted.ckpt": "0" * 64}


class ExperimentTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.vocab = default_vocab()
        cls.weights, cls.plant_map = default_planted_model(PLANT_CONFIG, cls.vocab, seed=0)
        cls.cfg = ExperimentConfig.from_dict(SMALL_RUN)

    def run_experiment(self, experiment, cfg=None, log=None):
        return experiment(cfg or self.cfg, self.weights, self.vocab, PROVENANCE, log)


class HelperTests(unittest.TestCase):
    def test_compare_constant_zero_differences(self):
        result = compare([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        self.assertEqual((result["t"], result["p"]), (0.0, 1.0))
        self.assertEqual(result["mean_difference"], 0.0)
        self.assertEqual(result["df"], 2)

    def test_compare_reports_paired_t(self):
        result = compare([2.0, 3.0, 5.0], [1.0, 1.0, 2.0])
        self.assertAlmostEqual(result["t"], 3.4641, places=4)
        self.assertAlmostEqual(result["mean_difference"], 2.0)

    def test_prompt_prefix_keeps_placement(self):
        plain = build_tasks(SPEED_TASK_PROMPTS[0], [4], 10)[0]
        prefixed = build_tasks(SPEED_TASK_PROMPTS[0], [4], 10, ("fast",))[0]
        self.assertEqual(prefixed.prompt, "fast " + SPEED_TASK_PROMPTS[0])
        self.assertEqual(prefixed.goal, plain.goal)
        self.assertEqual(prefixed.object_position, make_task(SPEED_TASK_PROMPTS[0], 4).object_position)

    def test_random_refs_are_seeded_and_distinct(self):
        weights, _plant_map = default_planted_model(PLANT_CONFIG, default_vocab(), seed=0)
        refs = random_refs(weights, 6, 0, "fast")
        self.assertEqual(refs, random_refs(weights, 6, 0, "fast"))
        self.assertEqual(len(set(refs)), 6)
        self.assertNotEqual(refs, random_refs(weights, 6, 0, "slow"))


class SpeedSweepTests(ExperimentTestCase):
    def test_report_structure(self):
        messages = []
        result = self.run_experiment(experiment_speed_sweep, log=messages.append)
        report = result.report
        self.assertEqual(report["experiment"], "speed_sweep")
        self.assertEqual(report["version"], AppInfo.get_version())
        self.assertEqual(report["config_hash"], self.cfg.config_hash)
        self.assertEqual(report["checkpoints"], PROVENANCE)
        self.assertEqual(len(report["rollout_seeds"]), 2)
        self.assertEqual(len(report["cells"]), 4)
        self.assertEqual(len(report["comparisons"]), 2)
        self.assertEqual(len(messages), 4)
        fast = next(item for item in report["selections"] if item["concept"] == "fast")
        self.assertEqual(sorted(fast["neurons"]), [list(ref) for ref in self.plant_map.refs("fast")])

    def test_planted_fast_cluster_outpaces_slow_cluster(self):
        cfg = ExperimentConfig.from_dict(dict(SMALL_RUN, alphas=[0.0, 2.0, 10.0]))
        report = self.run_experiment(experiment_speed_sweep, cfg).report
        by_alpha = {comparison["alpha"]: comparison for comparison in report["comparisons"]}
        self.assertEqual(by_alpha[0.0]["mean_difference"], 0.0)
        self.assertEqual(by_alpha[0.0]["mean_first"], report["baseline_mean_displacement"])
        for alpha in (2.0, 10.0):
            self.assertGreater(by_alpha[alpha]["mean_first"], by_alpha[alpha]["mean_second"], alpha)

    def test_runs_are_byte_identical_across_worker_counts(self):
        first = self.run_experiment(experiment_speed_sweep)
        threaded_cfg = ExperimentConfig.from_dict(dict(SMALL_RUN, workers=2))
        second = self.run_experiment(experiment_speed_sweep, threaded_cfg)
        first.report.pop("config_hash")
        second.report.pop("config_hash")
        self.assertEqual(dump_json(first.report), dump_json(second.report))

    def test_results_are_saved(self):
        result = self.run_experiment(experiment_speed_sweep)
        with tempfile.TemporaryDirectory() as directory:
            paths = result.save(directory)
            self.assertEqual([os.path.basename(path) for path in paths], ["speed_sweep.json", "speed_sweep.csv"])
            lines = Path(paths[1]).read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "concept,size,alpha,mean_displacement,std_displacement")
        self.assertEqual(len(lines), 5)


class DepthTests(ExperimentTestCase):
    def test_report_structure(self):
        report = self.run_experiment(experiment_depth).report
        self.assertEqual(report["concept"], "up")
        self.assertEqual(len(report["clusters"]), 3)
        self.assertEqual([cluster["region"] for cluster in report["clusters"]], ["early", "late", "full"])
        self.assertEqual(len(report["cells"]), 6)
        self.assertEqual(set(report["region_means"]), {"early", "late", "full"})

    def test_depth_is_deterministic(self):
        first = self.run_experiment(experiment_depth)
        second = self.run_experiment(experiment_depth)
        self.assertEqual(dump_json(first.report), dump_json(second.report))

    def test_k_must_fit_the_smallest_region(self):
        cfg = ExperimentConfig.from_dict(dict(SMALL_RUN, knn_k=[64]))
        with self.assertRaises(ConfigValidationError):
            self.run_experiment(experiment_depth, cfg)


class BaselineTests(ExperimentTestCase):
    def test_report_structure(self):
        result = self.run_experiment(experiment_baselines)
        pairs = result.report["pairs"]
        self.assertEqual([pair["metric"] for pair in pairs], ["max_height", "mean_displacement"])
        speed = pairs[1]
        fast = next(entry for entry in speed["concepts"] if entry["concept"] == "fast")
        self.assertEqual(list(fast["variants"]), ["none", "prompt", "random", "keyword"])
        self.assertEqual(set(fast["versus_none"]), {"prompt", "random", "keyword"})
        self.assertEqual(fast["variants"]["prompt"]["prompt"], "fast risk " + SPEED_TASK_PROMPTS[0])
        self.assertEqual(sorted(fast["variants"]["keyword"]["neurons"]), [list(ref) for ref in self.plant_map.refs("fast")])
        header, rows = result.tables["baselines_box.csv"]
        self.assertEqual(header, ("pair", "concept", "variant", "rollout", "value"))
        self.assertEqual(len(rows), 2 * 2 * 4 * 2)

    def test_baselines_are_deterministic(self):
        first = self.run_experiment(experiment_baselines)
        second = self.run_experiment(experiment_baselines)
        self.assertEqual(dump_json(first.report), dump_json(second.report))


if __name__ == "__main__":
    unittest.main()
