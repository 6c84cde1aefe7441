"""实验配置加载、归一化与持久化回归测试。"""

import io
import json
import sys
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path
from unittest.mock import patch


PROJECT_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(PROJECT_ROOT / "src"))

from experiments.config import ExperimentConfig
from model.vocab import default_vocab
from utils.config_manager import ConfigManager
from utils.errors import ConfigValidationError


class ConfigManagerTests(unittest.TestCase):
    def test_defaults_match_documented_grid(self):
        config = ConfigManager().config
        self.assertEqual(config["cluster_sizes"], [10, 20])
        self.assertEqual(config["knn_k"], [10, 20, 40])
        self.assertEqual(config["alphas"], [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 20.0])
        self.assertEqual(config["rollouts_per_cell"], 20)
        self.assertEqual(config["variant"], "post-activation")
        self.assertEqual(config["keywords"]["fast"], ["fast", "risk"])

    def test_load_normalizes_partial_or_invalid_fields(self):
        with tempfile.TemporaryDirectory() as directory:
            config_path = Path(directory) / "config.json"
            config_path.write_text(json.dumps({
                "seed": 7,
                "alphas": [0, 5, 5],
                "knn_k": ["ten"],
                "variant": "sideways",
                "model": {"n_layers": 2, "d_model": "wide"},
                "train": {"finetune": {"steps": 10, "lr": -1}},
                "init": {"std": 0, "gate_gain": 2},
                "data": {"pretrain_sentences": 10},
                "unknown": True,
            }), encoding="utf-8")
            manager = ConfigManager(str(config_path))
        config = manager.config
        self.assertEqual(config["seed"], 7)
        self.assertEqual(config["alphas"], [0.0, 5.0])
        self.assertEqual(config["knn_k"], [10, 20, 40])
        self.assertEqual(config["variant"], "post-activation")
        self.assertEqual(config["model"]["n_layers"], 2)
        self.assertEqual(config["model"]["d_model"], 64)
        self.assertEqual(config["train"]["finetune"], {"lr": 3e-4, "batch_size": 32, "steps": 10})
        self.assertEqual(config["init"], {"std": 0.02, "gate_gain": 2.0})
        self.assertEqual(config["data"]["pretrain_sentences"], 2000)
        self.assertNotIn("unknown", config)

    def test_broken_file_falls_back_to_defaults_without_overwriting(self):
        with tempfile.TemporaryDirectory() as directory:
            broken_path = Path(directory) / "broken.json"
            broken_path.write_text("[]", encoding="utf-8")
            output = io.StringIO()
            with redirect_stdout(output):
                manager = ConfigManager(str(broken_path))
            self.assertIn("加载配置文件失败", output.getvalue())
            self.assertEqual(broken_path.read_text(encoding="utf-8"), "[]")
        self.assertEqual(manager.config, ConfigManager().config)

    def test_deep_json_is_handled_as_invalid_config(self):
        with tempfile.TemporaryDirectory() as directory:
            config_path = Path(directory) / "config.json"
            config_path.write_text("[" * 2000 + "]" * 2000, encoding="utf-8")
            with redirect_stdout(io.StringIO()):
                manager = ConfigManager(str(config_path))
        self.assertEqual(manager.config["seed"], 0)

    def test_update_renormalizes_overrides(self):
        manager = ConfigManager()
        manager.update({"seed": 3, "workers": 0})
        self.assertEqual(manager.config["seed"], 3)
        self.assertEqual(manager.config["workers"], 1)

    def test_knn_rule_accepts_known_rules_only(self):
        manager = ConfigManager()
        self.assertEqual(manager.config["knn_rule"], "mutual")
        self.assertEqual(manager.update({"knn_rule": "union"})["knn_rule"], "union")
        self.assertEqual(manager.update({"knn_rule": "directed"})["knn_rule"], "mutual")

    def test_save_is_byte_stable_and_reports_failures(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "saved.json"
            manager = ConfigManager()
            self.assertTrue(manager.save_config(str(path)))
            first = path.read_bytes()
            self.assertTrue(ConfigManager(str(path)).save_config(str(path)))
            self.assertEqual(path.read_bytes(), first)
            with patch("utils.config_manager.atomic_write_text", side_effect=OSError("disk full")):
                with redirect_stdout(io.StringIO()):
                    self.assertFalse(manager.save_config(str(path)))
            self.assertEqual(path.read_bytes(), first)


class ExperimentConfigTests(unittest.TestCase):
    def setUp(self):
        self.vocab = default_vocab()

    def test_saved_run_config_reloads_identically(self):
        cfg = ExperimentConfig.from_dict({"seed": 9, "knn_rule": "union"})
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "config.json"
            self.assertTrue(cfg.save(str(path)))
            reloaded = ExperimentConfig.from_file(str(path))
        self.assertEqual(reloaded.raw, cfg.raw)
        self.assertEqual(reloaded.config_hash, cfg.config_hash)

    def test_config_hash_changes_with_content(self):
        first = ExperimentConfig.defaults()
        self.assertEqual(first.config_hash, ExperimentConfig.defaults().config_hash)
        self.assertNotEqual(first.config_hash, ExperimentConfig.from_dict({"seed": 1}).config_hash)

    def test_rollout_seeds_are_deterministic_per_label(self):
        cfg = ExperimentConfig.from_dict({"seed": 5})
        self.assertEqual(cfg.rollout_seeds(4, "sweep"), cfg.rollout_seeds(4, "sweep"))
        self.assertNotEqual(cfg.rollout_seeds(4, "sweep"), cfg.rollout_seeds(4, "depth"))

    def test_validation_rejects_untokenizable_concept(self):
        cfg = ExperimentConfig.from_dict({"concepts": ["zzqx"]})
        with self.assertRaises(ConfigValidationError):
            cfg.validate_against(cfg.model_config(self.vocab), self.vocab)

    def test_validation_rejects_cluster_larger_than_ffn(self):
        cfg = ExperimentConfig.from_dict({"cluster_sizes": [10, 1000]})
        with self.assertRaises(ConfigValidationError):
            cfg.validate_against(cfg.model_config(self.vocab), self.vocab)

    def test_default_config_validates_against_default_model(self):
        cfg = ExperimentConfig.defaults()
        cfg.validate_against(cfg.model_config(self.vocab), self.vocab)


if __name__ == "__main__":
    unittest.main()
