"""实验配置的读取、校验归一化与持久化。"""

import copy
import json
import os

from .file_utils import atomic_write_text, dump_json, get_base_path


class ConfigManager:
    """读取 JSON 实验配置，逐字段校验；类型错误或越界的字段恢复默认值，未知字段丢弃。"""

    VARIANTS = {"post-activation", "pre-gate"}
    KNN_RULES = ("mutual", "union")
    DEPTH_REGIONS = ("early", "late", "full")
    BASELINES = ("none", "prompt", "random", "keyword")
    MODEL_LIMITS = {
        "n_layers": (1, 64),
        "d_model": (4, 1024),
        "d_ffn": (4, 8192),
        "n_heads": (1, 64),
        "max_seq": (8, 4096),
    }

    def __init__(self, config_file=None):
        self.config_file = os.path.join(get_base_path(), config_file) if config_file else None
        self.config = self._load_config()

    def _get_default_config(self):
        return {
            "checkpoint": "",
            "pretrained_checkpoint": "",
            "concepts": ["fast", "slow"],
            "concept_pairs": [["low", "high"], ["slow", "fast"]],
            "keywords": {
                "fast": ["fast", "risk"],
                "slow": ["slow", "safe"],
                "low": ["low"],
                "high": ["high"],
                "up": ["up"],
            },
            "depth_concept": "up",
            "cluster_sizes": [10, 20],
            "knn_k": [10, 20, 40],
            "knn_rule": "mutual",
            "alphas": [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 20.0],
            "depth_regions": list(self.DEPTH_REGIONS),
            "baselines": list(self.BASELINES),
            "baseline_alpha": 10.0,
            "baseline_size": 6,
            "rollouts_per_cell": 20,
            "baseline_rollouts": 10,
            "pool_k": 10,
            "seed": 0,
            "variant": "post-activation",
            "workers": 1,
            "model": {"n_layers": 6, "d_model": 64, "d_ffn": 256, "n_heads": 4, "max_seq": 96},
            "init": {"std": 0.02, "gate_gain": 3.0},
            "train": {
                "pretrain": {"lr": 3e-4, "batch_size": 32, "steps": 1500},
                "finetune": {"lr": 3e-4, "batch_size": 32, "steps": 1000},
            },
            "data": {"pretrain_sentences": 2000, "demos_per_style": 12, "horizon": 40},
        }

    @staticmethod
    def _valid_int(value, minimum, maximum):
        return type(value) is int and minimum <= value <= maximum

    @staticmethod
    def _valid_number(value, minimum, maximum):
        return type(value) in (int, float) and minimum <= value <= maximum

    @staticmethod
    def _valid_words(value):
        return isinstance(value, list) and bool(value) and all(isinstance(item, str) and item.strip() for item in value)

    def _normalize_int_list(self, raw, default, minimum, maximum):
        if isinstance(raw, list) and raw and all(self._valid_int(item, minimum, maximum) for item in raw):
            return list(dict.fromkeys(raw))
        return default

    def _normalize_stage(self, raw, default):
        stage = dict(default)
        if not isinstance(raw, dict):
            return stage
        if self._valid_number(raw.get("lr"), 1e-7, 1.0) and raw["lr"] > 0:
            stage["lr"] = float(raw["lr"])
        if self._valid_int(raw.get("batch_size"), 1, 4096):
            stage["batch_size"] = raw["batch_size"]
        if self._valid_int(raw.get("steps"), 0, 1_000_000):
            stage["steps"] = raw["steps"]
        return stage

    def _normalize_config(self, raw):
        """将外部 JSON 归一化为当前配置结构，未知字段不保留。"""
        if not isinstance(raw, dict):
            raise ValueError("配置根节点必须是 JSON 对象")
        config = self._get_default_config()
        for key in ("checkpoint", "pretrained_checkpoint"):
            if isinstance(raw.get(key), str):
                config[key] = raw[key]
        if self._valid_words(raw.get("concepts")):
            config["concepts"] = list(raw["concepts"])
        pairs = raw.get("concept_pairs")
        if isinstance(pairs, list) and pairs and all(
            self._valid_words(pair) and len(pair) == 2 and pair[0] != pair[1] for pair in pairs
        ):
            config["concept_pairs"] = [list(pair) for pair in pairs]
        keywords = raw.get("keywords")
        if isinstance(keywords, dict):
            for concept, words in keywords.items():
                if isinstance(concept, str) and concept and self._valid_words(words):
                    config["keywords"][concept] = list(words)
        if isinstance(raw.get("depth_concept"), str) and raw["depth_concept"].strip():
            config["depth_concept"] = raw["depth_concept"]

        config["cluster_sizes"] = self._normalize_int_list(raw.get("cluster_sizes"), config["cluster_sizes"], 1, 8192)
        config["knn_k"] = self._normalize_int_list(raw.get("knn_k"), config["knn_k"], 1, 8192)
        if raw.get("knn_rule") in self.KNN_RULES:
            config["knn_rule"] = raw["knn_rule"]
        alphas = raw.get("alphas")
        if isinstance(alphas, list) and alphas and all(self._valid_number(item, -1e3, 1e3) for item in alphas):
            config["alphas"] = [float(item) for item in dict.fromkeys(alphas)]
        regions = raw.get("depth_regions")
        if isinstance(regions, list) and regions and all(item in self.DEPTH_REGIONS for item in regions):
            config["depth_regions"] = list(dict.fromkeys(regions))
        baselines = raw.get("baselines")
        if isinstance(baselines, list) and baselines and all(item in self.BASELINES for item in baselines):
            config["baselines"] = [item for item in self.BASELINES if item in baselines]
        if self._valid_number(raw.get("baseline_alpha"), -1e3, 1e3):
            config["baseline_alpha"] = float(raw["baseline_alpha"])
        if self._valid_int(raw.get("baseline_size"), 1, 8192):
            config["baseline_size"] = raw["baseline_size"]
        if self._valid_int(raw.get("rollouts_per_cell"), 2, 10_000):
            config["rollouts_per_cell"] = raw["rollouts_per_cell"]
        if self._valid_int(raw.get("baseline_rollouts"), 2, 10_000):
            config["baseline_rollouts"] = raw["baseline_rollouts"]
        if self._valid_int(raw.get("pool_k"), 1, 100_000):
            config["pool_k"] = raw["pool_k"]
        if self._valid_int(raw.get("seed"), 0, 2**63 - 1):
            config["seed"] = raw["seed"]
        if raw.get("variant") in self.VARIANTS:
            config["variant"] = raw["variant"]
        if self._valid_int(raw.get("workers"), 1, 256):
            config["workers"] = raw["workers"]

        model_raw = raw.get("model", {})
        if isinstance(model_raw, dict):
            for key, (minimum, maximum) in self.MODEL_LIMITS.items():
                if self._valid_int(model_raw.get(key), minimum, maximum):
                    config["model"][key] = model_raw[key]

        init_raw = raw.get("init", {})
        if isinstance(init_raw, dict):
            if self._valid_number(init_raw.get("std"), 1e-6, 10.0) and init_raw["std"] > 0:
                config["init"]["std"] = float(init_raw["std"])
            if self._valid_number(init_raw.get("gate_gain"), 0.0, 100.0):
                config["init"]["gate_gain"] = float(init_raw["gate_gain"])

        train_raw = raw.get("train", {})
        if isinstance(train_raw, dict):
            for stage in ("pretrain", "finetune"):
                config["train"][stage] = self._normalize_stage(train_raw.get(stage), config["train"][stage])

        data_raw = raw.get("data", {})
        if isinstance(data_raw, dict):
            data = config["data"]
            if self._valid_int(data_raw.get("pretrain_sentences"), 1000, 1_000_000):
                data["pretrain_sentences"] = data_raw["pretrain_sentences"]
            if self._valid_int(data_raw.get("demos_per_style"), 1, 10_000):
                data["demos_per_style"] = data_raw["demos_per_style"]
            if self._valid_int(data_raw.get("horizon"), 1, 1000):
                data["horizon"] = data_raw["horizon"]
        return config

    def _load_config(self):
        if not self.config_file:
            return self._get_default_config()
        if not os.path.exists(self.config_file):
            print(f"配置文件不存在，使用默认配置: {self.config_file}")
            return self._get_default_config()
        try:
            with open(self.config_file, "r", encoding="utf-8") as stream:
                raw = json.load(stream)
            return self._normalize_config(raw)
        except (OSError, ValueError, RecursionError) as error:
            print(f"加载配置文件失败: {error}")
            # 损坏的配置由用户修复；不要用默认值覆盖原文件。
            return self._get_default_config()

    def update(self, overrides):
        """合并覆盖项后重新归一化，例如命令行的 --seed。"""
        raw = copy.deepcopy(self.config)
        raw.update(overrides)
        self.config = self._normalize_config(raw)
        return self.config

    def to_json(self):
        return dump_json(self.config)

    def save_config(self, path):
        """以原子替换写出归一化后的配置。"""
        try:
            atomic_write_text(path, self.to_json())
            return True
        except OSError as error:
            print(f"保存配置文件失败: {error}")
            return False
