"""VSteer 命令行入口。

每个子命令都接受 --seed、--config、--out；输出文件写在 --out 目录下，文件名固定。
退出码：0 成功，1 读写或检查点格式错误，2 参数或配置校验错误，3 verify 验收失败。
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from analysis.diff import diff_checkpoints, instruction_rows, instruction_token_analysis
from analysis.lens import action_token_fraction_by_layer, extract_value_vectors, pattern_survey, project_to_tokens, survey_rows
from analysis.semantics import (
    DEPTH_REGIONS, KNN_RULES, cluster_report, keyword_select_vectors, knn_clusters, partition_by_depth,
    select_concept_cluster, semantic_embeddings, weight_uniformity,
)
from experiments.config import ExperimentConfig
from experiments.runner import experiment_baselines, experiment_depth, experiment_speed_sweep
from model.checkpoint import load_checkpoint, read_header, save_checkpoint
from model.steering import make_intervention
from model.transformer import init_weights
from model.vocab import default_vocab
from oracle.plant import PlantMap, default_planted_model, verify_plant
from sim.environment import PROMPT_GOALS, make_task
from sim.rollout import max_height, rollout, step_displacements
from training.corpus import demo_sequences, gen_demos, gen_pretrain_corpus
from training.trainer import (
    ACTION_POSITIONS, ALL_POSITIONS, Hyperparams, LossCurve, action_accuracy, train_stage,
)
from utils.app_info import AppInfo
from utils.errors import CheckpointFormatError, IndexOutOfRange, IoFailure, PreconditionError
from utils.file_utils import atomic_write_text, ensure_directory, sha256_file, write_csv, write_json
from utils.log_writer import LogWriter


EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_VERIFY_FAILED = 3


class Session:
    """一次命令执行的输出目录、配置与运行日志。"""

    def __init__(self, args):
        if args.config and not os.path.isfile(args.config):
            raise IoFailure(f"配置文件不存在: {args.config}")
        overrides = {"seed": args.seed} if args.seed is not None else {}
        if getattr(args, "checkpoint", None):
            overrides["checkpoint"] = args.checkpoint
        config_path = os.path.abspath(args.config) if args.config else None
        self.config = ExperimentConfig.from_file(config_path, overrides)
        self.out = ensure_directory(args.out)
        self.vocab = default_vocab()
        self.writer = LogWriter()
        self.generation = 1
        self.writer.open(os.path.join(self.out, "run.log"), self.generation)
        if not self.config.save(self.path("config.json")):
            raise IoFailure(f"无法写出运行配置: {self.path('config.json')}")

    @property
    def seed(self):
        return self.config.seed

    def path(self, name):
        return os.path.join(self.out, name)

    def log(self, message):
        self.writer.log(message, self.generation)

    def say(self, message):
        print(message)
        self.log(message)

    def close(self):
        self.writer.close(self.generation)
        self.writer.stop()
        for error in self.writer.take_errors():
            print(error, file=sys.stderr)


def _checkpoint_path(args, session, fallback_key="checkpoint"):
    path = getattr(args, "checkpoint", None) or session.config.raw.get(fallback_key)
    if not path:
        raise PreconditionError("需要通过 --checkpoint 或配置文件指定检查点")
    return path


def _load(args, session, fallback_key="checkpoint"):
    path = _checkpoint_path(args, session, fallback_key)
    weights, vocab, _cfg = load_checkpoint(path)
    session.log(f"已加载检查点 {path}")
    return weights, vocab, {os.path.basename(path): sha256_file(path)}


def _parse_neurons(text):
    """"层:神经元" 以逗号分隔，例如 "5:12,5:40"。"""
    entries = []
    for item in text.split(","):
        layer, _sep, neuron = item.strip().partition(":")
        if not _sep:
            raise PreconditionError(f"无法解析神经元 {item!r}，格式应为 层:神经元")
        entries.append((int(layer), int(neuron)))
    return entries


def cmd_gen_data(args, session):
    data = session.config.data
    corpus = gen_pretrain_corpus(session.seed, data["pretrain_sentences"], session.vocab)
    demos = gen_demos(session.seed, data["demos_per_style"], session.vocab, data["horizon"])
    atomic_write_text(session.path("corpus.txt"), "\n".join(corpus.sentences) + "\n")
    write_json(session.path("demos.json"), [
        {
            "prompt": episode.prompt,
            "speed": episode.speed,
            "height": episode.height,
            "positions": [list(position) for position in episode.positions],
            "actions": [session.vocab.surface(token) for token in episode.actions()],
        }
        for episode in demos
    ])
    session.say(f"语料 {len(corpus.sentences)} 句，示教 {len(demos)} 条")
    return EXIT_OK


def _train(session, weights, sequences, stage, mask_policy):
    stage_cfg = session.config.train[stage]
    hp = Hyperparams(lr=stage_cfg["lr"], batch_size=stage_cfg["batch_size"], steps=stage_cfg["steps"], seed=session.seed, stage=stage)
    curve = LossCurve(session.writer, session.path(f"loss_{stage}.csv"), session.generation + 1)
    try:
        trained = train_stage(weights, sequences, hp, mask_policy, curve, progress=True)
    finally:
        curve.close()
        session.writer.open(session.path("run.log"), session.generation, append=True)
    session.say(f"{stage} 完成，最近平均损失 {curve.final_loss():.4f}")
    return trained, hp, curve


def cmd_pretrain(args, session):
    cfg = session.config.model_config(session.vocab)
    corpus = gen_pretrain_corpus(session.seed, session.config.data["pretrain_sentences"], session.vocab)
    init = session.config.init
    weights = init_weights(cfg, session.seed, init["std"], init["gate_gain"])
    trained, hp, curve = _train(session, weights, corpus.token_sequences(session.vocab), "pretrain", ALL_POSITIONS)
    metadata = {"stage": "pretrain", "hyperparams": hp.to_dict(), "seed": session.seed, "final_loss": curve.final_loss()}
    save_checkpoint(trained, session.vocab, cfg, session.path("pretrained.ckpt"), metadata)
    return EXIT_OK


def cmd_finetune(args, session):
    weights, vocab, _provenance = _load(args, session, "pretrained_checkpoint")
    demos = gen_demos(session.seed, session.config.data["demos_per_style"], vocab, session.config.data["horizon"])
    sequences = demo_sequences(demos)
    trained, hp, curve = _train(session, weights, sequences, "finetune", ACTION_POSITIONS)
    accuracy = action_accuracy(trained, sequences)
    session.say(f"示教动作准确率 {accuracy:.3f}")
    metadata = {
        "stage": "finetune", "hyperparams": hp.to_dict(), "seed": session.seed,
        "final_loss": curve.final_loss(), "action_accuracy": accuracy,
    }
    save_checkpoint(trained, vocab, trained.config, session.path("finetuned.ckpt"), metadata)
    return EXIT_OK


def cmd_plant(args, session):
    cfg = session.config.model_config(session.vocab)
    weights, plant_map = default_planted_model(cfg, session.vocab, session.seed, args.beta, args.gamma)
    save_checkpoint(weights, session.vocab, cfg, session.path("planted.ckpt"), {"stage": "planted", "seed": session.seed})
    plant_map.save(session.path("plant_map.json"))
    session.say(f"植入层 {plant_map.layer}: " + ", ".join(f"{name}={list(neurons)}" for name, neurons in plant_map.neurons.items()))
    return EXIT_OK


def cmd_inspect(args, session):
    path = _checkpoint_path(args, session)
    header = read_header(path)
    weights, vocab, _cfg = load_checkpoint(path)
    summary = {"config": header["config"], "metadata": header["metadata"], "tensors": len(header["tensors"])}
    if args.layer is not None:
        block = weights.ffn_block(args.layer)
        if not 0 <= args.neuron < block.d_ffn:
            raise IndexOutOfRange(f"神经元索引 {args.neuron} 超出 [0, {block.d_ffn})")
        projection = project_to_tokens(block.wd[args.neuron], weights.unembedding)
        summary["projection"] = {
            "layer": args.layer,
            "neuron": args.neuron,
            "top": [{"token": vocab.surface(token), "logit": logit} for token, logit in projection.top(args.top)],
        }
        print(" ".join(projection.top_surfaces(vocab, args.top)))
    write_json(session.path("inspect.json"), summary)
    return EXIT_OK


def cmd_survey(args, session):
    weights, vocab, provenance = _load(args, session)
    survey = pattern_survey(weights, vocab, args.per_layer, session.seed)
    write_json(session.path("survey.json"), {"checkpoints": provenance, "seed": session.seed, "layers": survey})
    write_csv(session.path("survey.csv"), ("layer", "semantic", "non_semantic", "none"), survey_rows(survey))
    return EXIT_OK


def cmd_fractions(args, session):
    weights, _vocab, provenance = _load(args, session)
    fractions = action_token_fraction_by_layer(weights, args.k)
    write_json(session.path("fractions.json"), {"checkpoints": provenance, "k": args.k, "fractions": fractions})
    write_csv(session.path("fractions.csv"), ("layer", "action_fraction"), list(enumerate(fractions)))
    session.say(" ".join(f"{value:.3f}" for value in fractions))
    return EXIT_OK


def _knn_rule(args, session):
    return args.rule or session.config.knn_rule


def _region_clusters(weights, region, k, rule):
    embeddings = semantic_embeddings(extract_value_vectors(weights), weights.unembedding)
    region_embeddings = partition_by_depth(embeddings, region)
    return region_embeddings, knn_clusters(region_embeddings, k, rule)


def cmd_cluster(args, session):
    weights, vocab, provenance = _load(args, session)
    embeddings, clusters = _region_clusters(weights, args.region, args.k, _knn_rule(args, session))
    write_json(session.path("clusters.json"), {
        "checkpoints": provenance,
        "region": args.region,
        "k": args.k,
        "rule": _knn_rule(args, session),
        "weights": weight_uniformity(embeddings),
        "clusters": [cluster_report(cluster, vocab, weights.unembedding) for cluster in clusters],
    })
    session.say(f"{len(clusters)} 个簇")
    return EXIT_OK


def cmd_select(args, session):
    weights, vocab, provenance = _load(args, session)
    if args.keywords:
        refs = keyword_select_vectors(weights, vocab, args.keywords.split(","), args.pool_k, args.count)
        selection = {"mode": "keyword", "keywords": args.keywords.split(","), "members": [list(ref.key) for ref in refs]}
    else:
        _embeddings, clusters = _region_clusters(weights, args.region, args.k, _knn_rule(args, session))
        cluster, similarity = select_concept_cluster(args.concept, vocab, weights.unembedding, clusters)
        selection = dict(cluster_report(cluster, vocab, weights.unembedding, similarity), mode="concept", concept=args.concept)
    write_json(session.path("selection.json"), dict(selection, checkpoints=provenance))
    session.say(f"选中 {len(selection['members'])} 个价值向量")
    return EXIT_OK


def _load_pair(args):
    weights_a, vocab, _cfg = load_checkpoint(args.a)
    weights_b, _vocab_b, _cfg_b = load_checkpoint(args.b)
    provenance = {"a": sha256_file(args.a), "b": sha256_file(args.b)}
    return weights_a, weights_b, vocab, provenance


def cmd_diff(args, session):
    weights_a, weights_b, vocab, provenance = _load_pair(args)
    report = diff_checkpoints(weights_a, weights_b, args.k, session.config.workers)
    write_json(session.path("diff.json"), dict(report.to_dict(vocab), checkpoints=provenance))
    write_csv(session.path("diff.csv"), ("token", "count_a", "count_b", "z"), report.rows(vocab))
    top = [vocab.surface(token) for token in report.top_abs(5)]
    session.say("|z| 最大的 5 个 token: " + " ".join(top))
    return EXIT_OK


def cmd_instr_diff(args, session):
    weights_a, weights_b, vocab, provenance = _load_pair(args)
    if args.instructions:
        try:
            with open(args.instructions, "r", encoding="utf-8") as stream:
                instructions = [line.strip() for line in stream if line.strip()]
        except OSError as error:
            raise IoFailure(f"无法读取 {args.instructions}: {error}") from error
    else:
        demos = gen_demos(session.seed, session.config.data["demos_per_style"], vocab, session.config.data["horizon"])
        instructions = [episode.prompt for episode in demos]
    analysis = instruction_token_analysis(instructions, weights_a, weights_b, vocab, args.top_n, args.k)
    analysis["checkpoints"] = provenance
    write_json(session.path("instr_diff.json"), analysis)
    write_csv(session.path("instr_diff.csv"), ("token", "frequency", "count_a", "count_b", "z", "ratio"), instruction_rows(analysis))
    session.say(f"mean z = {analysis['mean_z']:.4f}, mean ratio = {analysis['mean_ratio']:.4f}")
    return EXIT_OK


def cmd_rollout(args, session):
    weights, vocab, _provenance = _load(args, session)
    spec = None
    if args.neurons:
        spec = make_intervention(_parse_neurons(args.neurons), args.alpha, session.config.variant, weights.config)
    elif args.keywords:
        refs = keyword_select_vectors(weights, vocab, args.keywords.split(","), session.config.pool_k, args.count)
        spec = make_intervention(refs, args.alpha, session.config.variant, weights.config)
    task = make_task(args.prompt, session.seed, horizon=session.config.data["horizon"])
    trace = rollout(weights, task, spec, vocab=vocab)
    trace.save(session.path("trace.json"), session.path("trace.csv"), vocab)
    displacements = step_displacements(trace)
    session.say(f"成功={trace.success} 最大高度={max_height(trace):.3f} 平均步长={displacements.mean:.4f}")
    return EXIT_OK


def _run_experiment(function, args, session):
    result = function(session.config, log=session.log)
    for path in result.save(session.out):
        session.log(f"已写出 {path}")
    print(f"报告已写入 {session.path(result.name + '.json')}")
    return EXIT_OK


def cmd_sweep(args, session):
    return _run_experiment(experiment_speed_sweep, args, session)


def cmd_depth(args, session):
    return _run_experiment(experiment_depth, args, session)


def cmd_baselines(args, session):
    return _run_experiment(experiment_baselines, args, session)


def cmd_verify(args, session):
    if args.checkpoint:
        weights, vocab, _cfg = load_checkpoint(args.checkpoint)
        if not args.map:
            raise PreconditionError("验证已有检查点时需要 --map 指定植入映射")
        plant_map = PlantMap.load(args.map)
    else:
        vocab = session.vocab
        weights, plant_map = default_planted_model(session.config.model_config(vocab), vocab, session.seed)
    report = verify_plant(weights, plant_map, vocab, k=args.k)
    write_json(session.path("verify.json"), report)
    for name, passed in report["checks"].items():
        session.say(f"{name}: {'通过' if passed else '失败'}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="vsteer", description=AppInfo.DESCRIPTION)
    parser.add_argument("--version", action="version", version=AppInfo.get_about_text())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="覆盖配置中的随机种子")
    common.add_argument("--config", default=None, help="实验配置 JSON 文件")
    common.add_argument("--out", default="out", help="输出目录")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text, checkpoint=False):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        if checkpoint:
            sub.add_argument("--checkpoint", default=None, help="检查点路径（默认取配置中的 checkpoint）")
        sub.set_defaults(handler=handler)
        return sub

    add("gen-data", cmd_gen_data, "生成预训练语料与专家示教")
    add("pretrain", cmd_pretrain, "语言预训练")
    add("finetune", cmd_finetune, "动作模仿微调", checkpoint=True)
    plant = add("plant", cmd_plant, "构造植入模型")
    plant.add_argument("--beta", type=float, default=3.0, help="概念 token 权重 β")
    plant.add_argument("--gamma", type=float, default=1.0, help="目标动作权重 γ")
    inspect = add("inspect", cmd_inspect, "查看检查点头部与价值向量投影", checkpoint=True)
    inspect.add_argument("--layer", type=int, default=None)
    inspect.add_argument("--neuron", type=int, default=0)
    inspect.add_argument("--top", type=int, default=10)
    survey = add("survey", cmd_survey, "价值向量模式抽样统计", checkpoint=True)
    survey.add_argument("--per-layer", type=int, default=10)
    fractions = add("fractions", cmd_fractions, "逐层动作 token 占比", checkpoint=True)
    fractions.add_argument("--k", type=int, default=100)
    cluster = add("cluster", cmd_cluster, "语义嵌入 kNN 聚类", checkpoint=True)
    cluster.add_argument("--k", type=int, default=10)
    cluster.add_argument("--region", choices=DEPTH_REGIONS, default="full")
    cluster.add_argument("--rule", choices=KNN_RULES, default=None, help="kNN 连边规则，默认取配置 knn_rule")
    select = add("select", cmd_select, "选择概念簇或关键词价值向量", checkpoint=True)
    select.add_argument("--concept", default="fast")
    select.add_argument("--keywords", default=None, help="逗号分隔的关键词；给出时使用关键词选择")
    select.add_argument("--k", type=int, default=10)
    select.add_argument("--region", choices=DEPTH_REGIONS, default="full")
    select.add_argument("--rule", choices=KNN_RULES, default=None)
    select.add_argument("--pool-k", type=int, default=10)
    select.add_argument("--count", type=int, default=6)
    for name, handler, help_text in (("diff", cmd_diff, "两个检查点的价值向量对比"),
                                     ("instr-diff", cmd_instr_diff, "指令 token 出现次数对比")):
        sub = add(name, handler, help_text)
        sub.add_argument("--a", required=True, help="基准检查点")
        sub.add_argument("--b", required=True, help="对比检查点")
        sub.add_argument("--k", type=int, default=100)
        if name == "instr-diff":
            sub.add_argument("--instructions", default=None, help="每行一条指令的文本文件")
            sub.add_argument("--top-n", type=int, default=200)
    run = add("rollout", cmd_rollout, "单次推演", checkpoint=True)
    run.add_argument("--prompt", choices=sorted(PROMPT_GOALS), default="place seal on blue plate")
    run.add_argument("--neurons", default=None, help="干预神经元，格式 层:神经元,...")
    run.add_argument("--keywords", default=None, help="逗号分隔的关键词，按关键词选择干预神经元")
    run.add_argument("--count", type=int, default=6)
    run.add_argument("--alpha", type=float, default=10.0)
    add("sweep", cmd_sweep, "速度概念簇大小 × α 网格实验", checkpoint=True)
    add("depth", cmd_depth, "深度定位实验", checkpoint=True)
    add("baselines", cmd_baselines, "与无干预、提示词修改、随机簇基线对比", checkpoint=True)
    verify = add("verify", cmd_verify, "植入流水线验收", checkpoint=True)
    verify.add_argument("--map", default=None, help="plant 子命令写出的 plant_map.json")
    verify.add_argument("--k", type=int, default=10)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    session = None
    try:
        session = Session(args)
        return args.handler(args, session)
    except PreconditionError as error:
        print(f"校验失败: {error}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointFormatError, OSError) as error:
        print(f"读写失败: {error}", file=sys.stderr)
        return EXIT_IO
    finally:
        if session is not None:
            session.close()


if __name__ == "__main__":
    raise SystemExit(main())
