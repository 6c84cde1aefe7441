"""转向实验：速度概念的簇大小 × α 网格、深度定位，以及与三种基线的对比。

报告只包含由输入决定的内容（配置哈希、检查点哈希、种子、版本号），相同输入重复运行得到逐字节相同的文件。
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from analysis.lens import extract_value_vectors
from analysis.semantics import (
    DEPTH_REGIONS, cluster_report, keyword_select_vectors, knn_clusters, partition_by_depth,
    select_concept_cluster, semantic_embeddings, weight_uniformity,
)
from model.checkpoint import load_checkpoint
from model.steering import make_intervention
from sim.environment import HEIGHT_TASK_PROMPT, SPEED_TASK_PROMPTS, make_task
from sim.rollout import max_height, rollout_tasks, step_displacements, y_displacement
from utils.app_info import AppInfo
from utils.errors import DegenerateVariance
from utils.file_utils import ensure_directory, sha256_file, write_csv, write_json
from utils.numerics import SeededStream
from utils.stats import PairedSamples, cohens_d, paired_t_test


SPEED_PROMPT = SPEED_TASK_PROMPTS[0]
HEIGHT_CONCEPTS = frozenset({"low", "high", "up", "down"})

# 大模型上深度定位的平均 Y 位移，仅作为量级参照写入报告。
LARGE_MODEL_DEPTH_MEANS = {"full": 0.098, "late": 0.086, "early": 0.007}
LARGE_MODEL_SPEED_IMPROVEMENT_PCT = 27.73


@dataclass
class ExperimentResult:
    name: str
    report: dict
    tables: dict = field(default_factory=dict)

    def save(self, out_dir):
        """写出 <name>.json 与各个 CSV 附表，返回写出的文件路径。"""
        ensure_directory(out_dir)
        paths = [os.path.join(out_dir, f"{self.name}.json")]
        write_json(paths[0], self.report)
        for filename, (header, rows) in sorted(self.tables.items()):
            path = os.path.join(out_dir, filename)
            write_csv(path, header, rows)
            paths.append(path)
        return paths


def _silent(_message):
    return None


def load_inputs(cfg, weights=None, vocab=None, provenance=None):
    """未直接给出权重时从 cfg.checkpoint 读取；返回 (weights, vocab, provenance)。"""
    if weights is None:
        weights, vocab, _model_cfg = load_checkpoint(cfg.checkpoint)
        provenance = {os.path.basename(cfg.checkpoint): sha256_file(cfg.checkpoint)}
    cfg.validate_against(weights.config, vocab)
    return weights, vocab, dict(provenance or {})


def report_header(name, cfg, provenance):
    return {
        "experiment": name,
        "version": AppInfo.get_version(),
        "seed": cfg.seed,
        "config_hash": cfg.config_hash,
        "checkpoints": dict(sorted(provenance.items())),
    }


def build_tasks(prompt, seeds, horizon, prefix_words=()):
    """按基准提示词布置场景；prefix_words 非空时只改写提示词，场景布置不变。"""
    tasks = []
    for seed in seeds:
        task = make_task(prompt, seed, horizon=horizon)
        if prefix_words:
            task = replace(task, prompt=" ".join(list(prefix_words) + [prompt]))
        tasks.append(task)
    return tasks


def mean_displacement(trace):
    return step_displacements(trace).mean


def run_variant(weights, vocab, tasks, spec, metric, workers):
    traces = rollout_tasks(weights, tasks, spec, workers, vocab)
    return [float(metric(trace)) for trace in traces], traces


def compare(first, second):
    """配对 t 检验与 Cohen's d；差值全为 0 时 t=0、p=1。"""
    samples = PairedSamples.of(first, second)
    differences = samples.differences()
    result = {
        "mean_first": float(np.mean(first)),
        "mean_second": float(np.mean(second)),
        "median_first": float(np.median(first)),
        "median_second": float(np.median(second)),
        "mean_difference": float(np.mean(differences)),
        "df": len(differences) - 1,
    }
    try:
        test = paired_t_test(samples)
        result.update(t=test.t, p=test.p)
    except DegenerateVariance:
        constant_zero = bool(np.all(differences == 0.0))
        result.update(t=0.0 if constant_zero else None, p=1.0 if constant_zero else float(np.finfo(float).tiny))
    try:
        result["cohens_d"] = cohens_d(first, second)
    except DegenerateVariance:
        result["cohens_d"] = 0.0 if result["mean_difference"] == 0.0 else None
    return result


def random_refs(weights, size, seed, label):
    """从全部价值向量中按种子无放回抽取 size 个 (层, 神经元)。"""
    cfg = weights.config
    picks = SeededStream(seed, f"random-cluster/{label}").choice(cfg.n_layers * cfg.d_ffn, size, replace=False)
    return sorted(divmod(int(index), cfg.d_ffn) for index in picks)


def experiment_speed_sweep(cfg, weights=None, vocab=None, provenance=None, log=None):
    """{概念} × 簇大小 × α 网格；每格为 N 次推演的平均步长位移，并对前两个概念逐格做配对比较。"""
    log = log or _silent
    weights, vocab, provenance = load_inputs(cfg, weights, vocab, provenance)
    seeds = cfg.rollout_seeds(cfg.rollouts_per_cell, "speed")
    tasks = build_tasks(SPEED_PROMPT, seeds, cfg.data["horizon"])
    baseline, _traces = run_variant(weights, vocab, tasks, None, mean_displacement, cfg.workers)

    cells = []
    values = {}
    selections = {}
    for concept in cfg.concepts:
        for size in cfg.cluster_sizes:
            refs = keyword_select_vectors(weights, vocab, cfg.keywords_for(concept), cfg.pool_k, size)
            selections[(concept, size)] = [list(ref.key) for ref in refs]
            for alpha in cfg.alphas:
                spec = make_intervention(refs, alpha, cfg.variant, weights.config)
                cell_values, _traces = run_variant(weights, vocab, tasks, spec, mean_displacement, cfg.workers)
                values[(concept, size, alpha)] = cell_values
                cells.append({
                    "concept": concept,
                    "size": size,
                    "alpha": alpha,
                    "mean_displacement": float(np.mean(cell_values)),
                    "std_displacement": float(np.std(cell_values)),
                    "per_rollout": cell_values,
                })
                log(f"speed concept={concept} size={size} alpha={alpha} mean={np.mean(cell_values):.4f}")

    comparisons = []
    if len(cfg.concepts) >= 2:
        first, second = cfg.concepts[0], cfg.concepts[1]
        for size in cfg.cluster_sizes:
            for alpha in cfg.alphas:
                comparison = compare(values[(first, size, alpha)], values[(second, size, alpha)])
                slower = comparison["mean_second"]
                comparison.update(
                    size=size,
                    alpha=alpha,
                    improvement_pct=(comparison["mean_first"] - slower) / slower * 100.0 if slower > 0 else None,
                )
                comparisons.append(comparison)

    report = report_header("speed_sweep", cfg, provenance)
    report.update(
        prompt=SPEED_PROMPT,
        rollout_seeds=seeds,
        baseline_mean_displacement=float(np.mean(baseline)),
        selections=[
            {"concept": concept, "size": size, "neurons": neurons}
            for (concept, size), neurons in selections.items()
        ],
        cells=cells,
        comparisons=comparisons,
        large_model_reference={"improvement_pct": LARGE_MODEL_SPEED_IMPROVEMENT_PCT},
    )
    rows = [(cell["concept"], cell["size"], cell["alpha"], cell["mean_displacement"], cell["std_displacement"]) for cell in cells]
    return ExperimentResult("speed_sweep", report, {
        "speed_sweep.csv": (("concept", "size", "alpha", "mean_displacement", "std_displacement"), rows),
    })


def experiment_depth(cfg, weights=None, vocab=None, provenance=None, log=None):
    """在 early/late/full 区域内分别聚类并选择概念簇，比较平均 Y 位移。"""
    log = log or _silent
    weights, vocab, provenance = load_inputs(cfg, weights, vocab, provenance)
    concept = cfg.depth_concept
    unembedding = weights.unembedding
    embeddings = semantic_embeddings(extract_value_vectors(weights), unembedding)
    seeds = cfg.rollout_seeds(cfg.rollouts_per_cell, "depth")
    tasks = build_tasks(HEIGHT_TASK_PROMPT, seeds, cfg.data["horizon"])
    baseline, _traces = run_variant(weights, vocab, tasks, None, y_displacement, cfg.workers)
    baseline_mean = float(np.mean(baseline))

    cells = []
    clusters_out = []
    for region in (name for name in DEPTH_REGIONS if name in cfg.depth_regions):
        region_embeddings = partition_by_depth(embeddings, region)
        for k in cfg.knn_k:
            clusters = knn_clusters(region_embeddings, k, cfg.knn_rule)
            cluster, similarity = select_concept_cluster(concept, vocab, unembedding, clusters)
            owners = set(cluster.members)
            members = [embedding for embedding in region_embeddings if embedding.owner in owners]
            summary = cluster_report(cluster, vocab, unembedding, similarity)
            summary.update(region=region, k=k, rule=cfg.knn_rule, cluster_count=len(clusters), weights=weight_uniformity(members))
            clusters_out.append(summary)
            for alpha in cfg.alphas:
                spec = make_intervention(cluster.members, alpha, cfg.variant, weights.config)
                cell_values, _traces = run_variant(weights, vocab, tasks, spec, y_displacement, cfg.workers)
                mean = float(np.mean(cell_values))
                cells.append({
                    "region": region,
                    "k": k,
                    "alpha": alpha,
                    "cluster_size": cluster.size,
                    "mean_y_displacement": mean,
                    "effect": mean - baseline_mean,
                    "per_rollout": cell_values,
                })
                log(f"depth region={region} k={k} alpha={alpha} mean={mean:.4f}")

    region_means = {}
    for region in cfg.depth_regions:
        effects = [cell["mean_y_displacement"] for cell in cells if cell["region"] == region]
        region_means[region] = float(np.mean(effects)) if effects else None

    report = report_header("depth", cfg, provenance)
    report.update(
        concept=concept,
        prompt=HEIGHT_TASK_PROMPT,
        rollout_seeds=seeds,
        baseline_mean_y_displacement=baseline_mean,
        clusters=clusters_out,
        cells=cells,
        region_means=region_means,
        large_model_reference=LARGE_MODEL_DEPTH_MEANS,
    )
    rows = [(cell["region"], cell["k"], cell["alpha"], cell["cluster_size"], cell["mean_y_displacement"], cell["effect"]) for cell in cells]
    return ExperimentResult("depth", report, {
        "depth.csv": (("region", "k", "alpha", "cluster_size", "mean_y_displacement", "effect"), rows),
    })


def _trajectory(trace):
    displacements = step_displacements(trace)
    return {
        "per_step": list(displacements.per_step),
        "cumulative": list(displacements.cumulative),
        "y": [float(y) for _x, y in trace.positions],
    }


def experiment_baselines(cfg, weights=None, vocab=None, provenance=None, log=None):
    """每个概念对比较无干预、提示词修改、随机簇与关键词簇四种变体。

    含高度概念的概念对使用低/高搬运任务并以最大高度为指标，其余使用慢/快搬运任务并以平均步长位移为指标。
    """
    log = log or _silent
    weights, vocab, provenance = load_inputs(cfg, weights, vocab, provenance)
    pairs = []
    box_rows = []
    for pair in cfg.concept_pairs:
        height_task = any(concept in HEIGHT_CONCEPTS for concept in pair)
        prompt = HEIGHT_TASK_PROMPT if height_task else SPEED_PROMPT
        metric_name = "max_height" if height_task else "mean_displacement"
        metric = max_height if height_task else mean_displacement
        seeds = cfg.rollout_seeds(cfg.baseline_rollouts, "baselines/" + "-".join(pair))
        tasks = build_tasks(prompt, seeds, cfg.data["horizon"])
        none_values, none_traces = run_variant(weights, vocab, tasks, None, metric, cfg.workers)

        concepts = []
        for concept in pair:
            keywords = cfg.keywords_for(concept)
            variants = {}
            trajectories = {}
            for variant in cfg.baselines:
                if variant == "none":
                    variant_values, traces = none_values, none_traces
                    detail = {}
                elif variant == "prompt":
                    prompt_tasks = build_tasks(prompt, seeds, cfg.data["horizon"], keywords)
                    variant_values, traces = run_variant(weights, vocab, prompt_tasks, None, metric, cfg.workers)
                    detail = {"prompt": prompt_tasks[0].prompt}
                else:
                    if variant == "random":
                        refs = random_refs(weights, cfg.baseline_size, cfg.seed, concept)
                    else:
                        refs = [ref.key for ref in keyword_select_vectors(weights, vocab, keywords, cfg.pool_k, cfg.baseline_size)]
                    spec = make_intervention(refs, cfg.baseline_alpha, cfg.variant, weights.config)
                    variant_values, traces = run_variant(weights, vocab, tasks, spec, metric, cfg.workers)
                    detail = {"neurons": [list(ref) for ref in refs], "alpha": cfg.baseline_alpha}
                variants[variant] = dict(detail, values=variant_values, median=float(np.median(variant_values)))
                trajectories[variant] = _trajectory(traces[0])
                box_rows += [("-".join(pair), concept, variant, index, value) for index, value in enumerate(variant_values)]
                log(f"baseline concept={concept} variant={variant} median={np.median(variant_values):.4f}")
            versus_none = {}
            if "none" in variants:
                for variant, entry in variants.items():
                    if variant != "none":
                        versus_none[variant] = compare(entry["values"], none_values)
            concepts.append({
                "concept": concept,
                "keywords": list(keywords),
                "variants": variants,
                "versus_none": versus_none,
                "trajectories": trajectories,
            })
        pairs.append({"pair": list(pair), "prompt": prompt, "metric": metric_name, "rollout_seeds": seeds, "concepts": concepts})

    report = report_header("baselines", cfg, provenance)
    report.update(pairs=pairs)
    return ExperimentResult("baselines", report, {
        "baselines_box.csv": (("pair", "concept", "variant", "rollout", "value"), box_rows),
    })
