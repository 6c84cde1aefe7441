"""运行前的实验配置：由 ConfigManager 归一化后的字典构造，并对照模型再校验。"""

from dataclasses import dataclass

from model.config import ModelConfig
from model.vocab import UNK_ID
from utils.config_manager import ConfigManager
from utils.errors import ConfigValidationError
from utils.file_utils import dump_json, sha256_text
from utils.numerics import SeededStream


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    @classmethod
    def defaults(cls):
        return cls(ConfigManager().config)

    @classmethod
    def from_file(cls, path, overrides=None):
        manager = ConfigManager(path)
        if overrides:
            manager.update(overrides)
        return cls(manager.config)

    @classmethod
    def from_dict(cls, data):
        manager = ConfigManager()
        manager.update(data)
        return cls(manager.config)

    def __getattr__(self, name):
        raw = object.__getattribute__(self, "raw")
        if name in raw:
            return raw[name]
        raise AttributeError(name)

    def save(self, path):
        manager = ConfigManager()
        manager.config = dict(self.raw)
        return manager.save_config(path)

    @property
    def config_hash(self):
        return sha256_text(dump_json(self.raw))

    def model_config(self, vocab):
        start, stop = vocab.action_range
        return ModelConfig(vocab_size=len(vocab), action_token_range=(start, stop), **self.raw["model"])

    def keywords_for(self, concept):
        return tuple(self.raw["keywords"].get(concept, [concept]))

    def rollout_seeds(self, count, label):
        stream = SeededStream(self.raw["seed"], f"rollout-seeds/{label}")
        return [int(value) for value in stream.integers(0, 2**31 - 1, count)]

    def validate_against(self, cfg, vocab):
        """概念必须可分词、簇大小与 kNN 的 k 必须适配模型规模。"""
        concepts = set(self.raw["concepts"]) | {self.raw["depth_concept"]}
        concepts |= {concept for pair in self.raw["concept_pairs"] for concept in pair}
        for concept in sorted(concepts):
            if all(token == UNK_ID for token in vocab.encode(concept)):
                raise ConfigValidationError(f"概念 {concept!r} 无法用模型词表分词")
            for word in self.keywords_for(concept):
                if vocab.token_id(word) == UNK_ID:
                    raise ConfigValidationError(f"关键词 {word!r} 不在词表中")
        if len(vocab) != cfg.vocab_size:
            raise ConfigValidationError(f"词表大小 {len(vocab)} 与模型 vocab_size={cfg.vocab_size} 不一致")
        total = cfg.n_layers * cfg.d_ffn
        for size in self.raw["cluster_sizes"] + [self.raw["baseline_size"]]:
            if size > cfg.d_ffn:
                raise ConfigValidationError(f"簇大小 {size} 超过 d_ffn={cfg.d_ffn}")
        region_sizes = {"early": total // 2, "late": total - total // 2, "full": total}
        smallest_region = min(region_sizes[region] for region in self.raw["depth_regions"])
        for k in self.raw["knn_k"]:
            if k >= smallest_region:
                raise ConfigValidationError(f"kNN 的 k={k} 必须小于深度区域内的价值向量数 {smallest_region}")
        return self
