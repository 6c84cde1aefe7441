"""植入模型：已知概念 → token → 动作耦合的合成检查点，以及对整条分析流水线的验收。"""

import json
from dataclasses import dataclass

import numpy as np

from analysis.lens import extract_value_vectors, project_to_tokens
from analysis.semantics import knn_clusters, select_concept_cluster, semantic_embeddings
from model.steering import POST_ACTIVATION, InterventionSpec, make_intervention, residual_shift
from model.transformer import forward, init_weights
from model.vocab import VARIANT_WORDS, default_vocab
from sim.environment import SPEED_TASK_PROMPTS, START_POSITION
from sim.rollout import build_context
from utils.errors import IndexOutOfRange, PreconditionError, ZeroVector
from utils.file_utils import read_json, write_json
from utils.numerics import SeededStream, to_compute


DEFAULT_BETA = 3.0
DEFAULT_GAMMA = 1.0
DEFAULT_NEURONS_PER_CONCEPT = 6
DEFAULT_FAMILY_CORRELATION = 0.3
VERIFY_ALPHAS = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 20.0)
MIN_CLUSTER_OVERLAP = 0.8

# 大步长与小步长、上升与下降各自对应的目标动作桶。
PLANT_TARGETS = {
    "fast": ("<A73>", "<A74>"),
    "slow": ("<A43>", "<A44>"),
    "high": ("<A47>", "<A37>"),
    "low": ("<A40>", "<A30>"),
    "up": ("<A46>", "<A36>"),
    "down": ("<A41>", "<A31>"),
}


@dataclass(frozen=True)
class PlantSpec:
    concept_tokens: dict
    target_actions: dict
    neurons_per_concept: int = DEFAULT_NEURONS_PER_CONCEPT
    layer: int = -1
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if list(self.concept_tokens) != list(self.target_actions):
            raise PreconditionError("概念 token 与目标动作必须覆盖相同的概念")
        seen = set()
        for concept, tokens in self.concept_tokens.items():
            if not tokens:
                raise PreconditionError(f"概念 {concept} 没有 token")
            if seen & set(tokens):
                raise PreconditionError(f"概念 {concept} 的 token 与其他概念重叠")
            seen |= set(tokens)
        if not self.beta > 0 or self.gamma < 0:
            raise PreconditionError("β 必须为正，γ 不能为负")
        if self.neurons_per_concept < 1:
            raise PreconditionError("每个概念至少植入 1 个神经元")

    @property
    def concepts(self):
        return list(self.concept_tokens)

    def to_dict(self):
        return {
            "concept_tokens": {name: list(ids) for name, ids in self.concept_tokens.items()},
            "target_actions": {name: list(ids) for name, ids in self.target_actions.items()},
            "neurons_per_concept": self.neurons_per_concept,
            "layer": self.layer,
            "beta": self.beta,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            concept_tokens={name: tuple(ids) for name, ids in data["concept_tokens"].items()},
            target_actions={name: tuple(ids) for name, ids in data["target_actions"].items()},
            neurons_per_concept=int(data["neurons_per_concept"]),
            layer=int(data["layer"]),
            beta=float(data["beta"]),
            gamma=float(data["gamma"]),
        )


def default_plant_spec(vocab=None, concepts=VARIANT_WORDS, beta=DEFAULT_BETA, gamma=DEFAULT_GAMMA):
    """每个概念使用其全部表面变体作为概念 token。"""
    vocab = vocab or default_vocab()
    return PlantSpec(
        concept_tokens={concept: tuple(vocab.folded_ids([concept])) for concept in concepts},
        target_actions={concept: tuple(vocab.token_id(surface) for surface in PLANT_TARGETS[concept]) for concept in concepts},
        beta=beta,
        gamma=gamma,
    )


@dataclass
class PlantMap:
    layer: int
    neurons: dict
    spec: PlantSpec
    seed: int = 0

    def refs(self, concept):
        return [(self.layer, neuron) for neuron in self.neurons[concept]]

    def all_entries(self):
        return {(self.layer, neuron) for neurons in self.neurons.values() for neuron in neurons}

    def to_dict(self):
        return {
            "layer": self.layer,
            "neurons": {concept: list(neurons) for concept, neurons in self.neurons.items()},
            "spec": self.spec.to_dict(),
            "seed": self.seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        return cls(
            layer=int(data["layer"]),
            neurons={concept: tuple(neurons) for concept, neurons in data["neurons"].items()},
            spec=PlantSpec.from_dict(data["spec"]),
            seed=int(data.get("seed", 0)),
        )

    def save(self, path):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def _resolve_layer(cfg, layer):
    resolved = layer if layer >= 0 else cfg.n_layers + layer
    if not 0 <= resolved < cfg.n_layers:
        raise IndexOutOfRange(f"植入层 {layer} 超出范围 [0, {cfg.n_layers})")
    return resolved


def typical_row_norm(wd):
    return float(np.median(np.sqrt(np.sum(to_compute(wd) ** 2, axis=1))))


def plant_model(base, spec, seed=0):
    """覆盖选中神经元的价值向量为 β·mean(概念行) + γ·mean(目标动作行)，并缩放到该层典型行范数。

    选中神经元的门控行 W₁ 置零，自然激活恒为 gelu(0)·(W₂x) = 0，只有转向时才写入残差流。
    其余神经元的参数逐位不变。返回 (新权重, PlantMap)。
    """
    cfg = base.config
    layer = _resolve_layer(cfg, spec.layer)
    total = spec.neurons_per_concept * len(spec.concepts)
    if total > cfg.d_ffn:
        raise IndexOutOfRange(f"需要植入 {total} 个神经元，超过 d_ffn={cfg.d_ffn}")
    for concept in spec.concepts:
        for token in spec.concept_tokens[concept] + spec.target_actions[concept]:
            if not 0 <= token < cfg.vocab_size:
                raise IndexOutOfRange(f"概念 {concept} 的 token {token} 超出词表范围")
        if not all(cfg.is_action(token) for token in spec.target_actions[concept]):
            raise PreconditionError(f"概念 {concept} 的目标必须是动作 token")
    picks = SeededStream(seed, "plant").choice(cfg.d_ffn, total, replace=False)
    wd_name = f"layers.{layer}.ffn.wd"
    w1_name = f"layers.{layer}.ffn.w1"
    wd = np.array(base.param(wd_name), dtype=np.float64)
    w1 = np.array(base.param(w1_name), dtype=np.float64)
    norm = typical_row_norm(wd)
    unembedding = base.unembedding
    neurons = {}
    for index, concept in enumerate(spec.concepts):
        chosen = sorted(int(neuron) for neuron in picks[index * spec.neurons_per_concept:(index + 1) * spec.neurons_per_concept])
        direction = spec.beta * np.mean(unembedding[list(spec.concept_tokens[concept])], axis=0)
        if spec.gamma > 0:
            direction = direction + spec.gamma * np.mean(unembedding[list(spec.target_actions[concept])], axis=0)
        length = float(np.sqrt(np.dot(direction, direction)))
        if length == 0.0:
            raise ZeroVector(f"概念 {concept} 的植入方向为零向量")
        wd[chosen] = direction / length * norm
        w1[chosen] = 0.0
        neurons[concept] = tuple(chosen)
    return base.replace({wd_name: wd, w1_name: w1}), PlantMap(layer, neurons, spec, int(seed))


def _target_ids(vocab, concepts):
    ids = [vocab.token_id(surface) for concept in concepts for surface in PLANT_TARGETS[concept]]
    return list(dict.fromkeys(ids))


def structured_base(cfg, vocab=None, seed=0, std=0.02, concepts=VARIANT_WORDS, correlation=DEFAULT_FAMILY_CORRELATION):
    """植入用的基座：随机初始化，再整理反嵌入与残差流的几何结构。

    d_model 空间拆成互相正交的几块：全 1 方向、概念族方向、概念变体各自的方向、
    每个目标动作 token 各自的方向，以及剩余的补空间。
    - 每个概念词族的表面变体行共享一个族方向（相关系数 correlation），各族方向两两夹角余弦为 -1/(F-1)；
    - 目标动作行各占一个方向，其余 token 行位于补空间；所有反嵌入行范数相同；
    - 嵌入、注意力输出与全部价值向量都投影到补空间，残差流因此不含概念与目标动作分量，且逐位置均值为零。
    """
    vocab = vocab or default_vocab()
    if not 0.0 <= correlation < 1.0:
        raise PreconditionError("族内相关系数必须位于 [0, 1)")
    weights = init_weights(cfg, seed, std)
    n = cfg.d_model
    families = [vocab.folded_ids([concept]) for concept in concepts]
    concept_ids = [token for ids in families for token in ids]
    target_ids = _target_ids(vocab, concepts)
    reserved = 1 + len(families) + len(concept_ids) + len(target_ids)
    if len(families) < 2 or reserved >= n:
        raise PreconditionError(f"d_model={n} 无法容纳 {len(families)} 个概念族与目标动作的独立子空间")
    seed_matrix = SeededStream(seed, "plant-base/basis").normal((n, n))
    seed_matrix[:, 0] = 1.0
    basis, _r = np.linalg.qr(seed_matrix)
    cursor = 1
    family_axes = basis[:, cursor:cursor + len(families)].T
    cursor += len(families)
    own_axes = basis[:, cursor:cursor + len(concept_ids)].T
    cursor += len(concept_ids)
    target_axes = basis[:, cursor:cursor + len(target_ids)].T
    complement = basis[:, reserved:]
    shared = family_axes - family_axes.mean(axis=0)
    shared /= np.sqrt(np.sum(shared * shared, axis=1, keepdims=True))
    row_norm = std * np.sqrt(n)

    stream = SeededStream(seed, "plant-base/rows")
    coefficients = stream.normal((cfg.vocab_size, complement.shape[1]))
    rows = coefficients @ complement.T
    rows *= row_norm / np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))
    position = 0
    for family, ids in enumerate(families):
        for token in ids:
            rows[token] = row_norm * (np.sqrt(correlation) * shared[family] + np.sqrt(1.0 - correlation) * own_axes[position])
            position += 1
    for axis, token in enumerate(target_ids):
        rows[token] = row_norm * target_axes[axis]

    projector = complement @ complement.T
    rescale = np.sqrt(n / complement.shape[1])
    updates = {"unembed": rows}
    for name in ("tok_embed", "pos_embed"):
        updates[name] = to_compute(weights.param(name)) @ projector * rescale
    for layer in range(cfg.n_layers):
        names = [f"layers.{layer}.ffn.wd"]
        if cfg.use_attention:
            names.append(f"layers.{layer}.attn.wo")
        for name in names:
            updates[name] = to_compute(weights.param(name)) @ projector * rescale
    return weights.replace(updates)


def default_planted_model(cfg, vocab=None, seed=0, beta=DEFAULT_BETA, gamma=DEFAULT_GAMMA):
    vocab = vocab or default_vocab()
    base = structured_base(cfg, vocab, seed)
    return plant_model(base, default_plant_spec(vocab, beta=beta, gamma=gamma), seed)


def reference_context(vocab, prompt=SPEED_TASK_PROMPTS[0]):
    """起点处的推演上下文：<bos> + 提示词 + 当前观察。"""
    return build_context(vocab, vocab.encode(prompt), [], START_POSITION)


def target_logit_series(weights, plant_map, concept, alphas, tokens, variant=POST_ACTIVATION):
    """转向该概念的植入集合后，末位置目标动作 token 的完整前向 logits，形状 (len(alphas), 目标数)。"""
    targets = list(plant_map.spec.target_actions[concept])
    rows = []
    for alpha in alphas:
        intervention = make_intervention(plant_map.refs(concept), alpha, variant, weights.config)
        logits, _trace = forward(weights, tokens, intervention)
        rows.append(logits[-1, targets])
    return np.stack(rows)


def _is_nondecreasing(series, tolerance=1e-9):
    return bool(np.all(np.diff(series, axis=0) >= -tolerance))


def verify_plant(weights, plant_map, vocab=None, unembedding=None, k=10, alphas=VERIFY_ALPHAS, top=5):
    """检查投影、聚类召回、α 单调性与空干预恒等；失败记录在报告中而不抛出。"""
    vocab = vocab or default_vocab()
    unembedding = weights.unembedding if unembedding is None else to_compute(unembedding)
    spec = plant_map.spec
    report = {"checks": {}, "concepts": {}}

    refs = extract_value_vectors(weights)
    embeddings = semantic_embeddings(refs, unembedding)
    clusters = knn_clusters(embeddings, k)
    tokens = reference_context(vocab)

    _logits, trace = forward(weights, tokens, None, capture=True)
    last_input = trace.ffn_inputs[plant_map.layer][-1]
    block = weights.ffn_block(plant_map.layer)
    wd = to_compute(weights.param(f"layers.{plant_map.layer}.ffn.wd"))
    projection_ok = True
    recovery_ok = True
    monotone_ok = True
    affine_ok = True
    for concept in spec.concepts:
        concept_set = set(spec.concept_tokens[concept])
        hits = []
        for neuron in plant_map.neurons[concept]:
            top_ids = project_to_tokens(wd[neuron], unembedding).top_ids(top)
            hits.append(sum(1 for token in top_ids if token in concept_set))
        concept_projection = all(count >= 2 for count in hits)

        cluster, similarity = select_concept_cluster(concept, vocab, unembedding, clusters)
        planted = set(plant_map.refs(concept))
        overlap = len(planted & set(cluster.members)) / cluster.size

        series = target_logit_series(weights, plant_map, concept, alphas, tokens)
        shifts = [residual_shift(last_input, block, plant_map.neurons[concept], alpha) for alpha in (0.0, 1.0, alphas[-1])]
        predicted = shifts[0] + alphas[-1] * (shifts[1] - shifts[0])
        affine_error = float(np.max(np.abs(predicted - shifts[2])))

        projection_ok &= concept_projection
        recovery_ok &= overlap >= MIN_CLUSTER_OVERLAP
        monotone_ok &= _is_nondecreasing(series)
        affine_ok &= affine_error <= 1e-6
        report["concepts"][concept] = {
            "planted": list(plant_map.neurons[concept]),
            "top_concept_hits": hits,
            "cluster_size": cluster.size,
            "cluster_overlap": overlap,
            "cluster_similarity": similarity,
            "target_logits": series.tolist(),
            "affine_error": affine_error,
        }

    baseline, _trace = forward(weights, tokens)
    empty, _trace = forward(weights, tokens, InterventionSpec.empty())
    identity_ok = bool(np.array_equal(baseline, empty))

    report["checks"] = {
        "projection": bool(projection_ok),
        "cluster_recovery": bool(recovery_ok),
        "alpha_monotone": bool(monotone_ok),
        "shift_affine": bool(affine_ok),
        "empty_identity": identity_ok,
    }
    report["k"] = k
    report["alphas"] = list(alphas)
    report["passed"] = all(report["checks"].values())
    return report
