"""预训练语料与专家示教数据。

预训练语料只包含语义词与观察 token：概念模板句让同一词族在上下文中共现，
落地句把速度、高度、方向词与对应的观察 token 序列放在一起，词可以在轨迹之前或之后。示教数据由脚本专家生成，
提示词中不出现任何风格词。
"""

from dataclasses import dataclass

import numpy as np

from model.vocab import BOS_ID, EOS_ID, OBS_BINS, PAD_ID, STYLE_WORDS, default_vocab, fold
from sim.environment import HEIGHT_TASK_PROMPT, HEIGHTS, SPEED_TASK_PROMPTS, SPEEDS, make_task
from sim.rollout import HISTORY_WINDOW, build_context, expert_rollout
from utils.errors import EmptyBatch, PreconditionError
from utils.numerics import SeededStream


MIN_SENTENCES = 1000
CONCEPT_FAMILIES = ("fast", "slow", "high", "low", "up", "down", "side")

_CONCEPT_TEMPLATES = (
    "the arm moves {a} and {b}",
    "{a} {b} {c}",
    "it is very {a} then {b}",
    "move {a} now {b}",
    "the robot goes {a} with {b}",
    "{a} and {b} and {c}",
)
_FILLER_TEMPLATES = (
    "pick the {obj} and place it {rel} the {color} plate",
    "put the {obj} {rel} the basket",
    "the gripper {verb} the {obj}",
    "robot arm {verb} a {color} {obj}",
    "{p1} {p2} the {obj}",
)
_OBJECTS = ("seal", "penguin", "block", "cube", "toy", "object")
_COLORS = ("blue", "white", "red", "green")
_RELATIONS = ("on", "in", "into", "onto", "to", "at", "toward")
_VERBS = ("moves", "grasp", "release", "carry", "pick", "put")
_PREFIX_PAIRS = (("con", "contact"), ("cont", "control"), ("convey", "con"), ("pre", "press"),
                 ("prefer", "present"), ("preview", "pre"))


@dataclass(frozen=True)
class PretrainCorpus:
    sentences: tuple

    def token_sequences(self, vocab=None):
        vocab = vocab or default_vocab()
        return [[BOS_ID] + vocab.encode(sentence) + [EOS_ID] for sentence in self.sentences]

    def word_counts(self):
        counts = {}
        for sentence in self.sentences:
            for word in sentence.split():
                counts[word] = counts.get(word, 0) + 1
        return counts


def _family_words(vocab, family):
    """词族中能够按空白分词的表面形式（带前导空格的变体只存在于词表中）。"""
    return [word for word in vocab.lexicons[family] if word == word.strip()]


def _grounded_observations(stream, family):
    """与概念对应的观察 token 序列。"""
    length = int(stream.integers(3, 6))
    if family in ("fast", "slow"):
        step = int(stream.integers(4, 6)) if family == "fast" else int(stream.integers(1, 3))
        x = int(stream.integers(0, 4))
        y = int(stream.integers(2, 10))
        xs = [min(OBS_BINS - 1, x + step * index) for index in range(length)]
        ys = [y] * length
    elif family in ("high", "low"):
        low, high = (12, 16) if family == "high" else (0, 4)
        xs = [int(stream.integers(0, OBS_BINS)) for _ in range(length)]
        ys = [int(stream.integers(low, high)) for _ in range(length)]
    elif family in ("up", "down"):
        start = int(stream.integers(0, 5)) if family == "up" else int(stream.integers(11, 16))
        sign = 2 if family == "up" else -2
        xs = [int(stream.integers(4, 12))] * length
        ys = [min(OBS_BINS - 1, max(0, start + sign * index)) for index in range(length)]
    else:
        xs = [int(stream.integers(0, OBS_BINS)) for _ in range(length)]
        ys = [int(stream.integers(0, OBS_BINS)) for _ in range(length)]
    return " ".join(f"<X{x:02d}> <Y{y:02d}>" for x, y in zip(xs, ys))


def gen_pretrain_corpus(seed, n_sentences, vocab=None):
    """确定性生成预训练语料；各概念词族按句子编号轮换，保证均衡。"""
    if n_sentences < MIN_SENTENCES:
        raise PreconditionError(f"语料句子数至少为 {MIN_SENTENCES}，当前为 {n_sentences}")
    vocab = vocab or default_vocab()
    stream = SeededStream(seed, "pretrain-corpus")
    families = {family: _family_words(vocab, family) for family in CONCEPT_FAMILIES}
    sentences = []
    for index in range(n_sentences):
        kind = index % 10
        if kind < 7:
            family = CONCEPT_FAMILIES[(index // 10 + kind) % len(CONCEPT_FAMILIES)]
            words = families[family]
            picks = [words[int(position)] for position in stream.integers(0, len(words), 3)]
            template = _CONCEPT_TEMPLATES[int(stream.integers(0, len(_CONCEPT_TEMPLATES)))]
            sentence = template.format(a=picks[0], b=picks[1], c=picks[2])
        elif kind < 9:
            family = CONCEPT_FAMILIES[int(stream.integers(0, 6))]
            words = families[family]
            word = words[int(stream.integers(0, len(words)))]
            trace = _grounded_observations(stream, family)
            # 7：先说词再给轨迹；8：先给轨迹再说词
            sentence = f"{word} {trace}" if kind == 7 else f"{trace} {word}"
        else:
            template = _FILLER_TEMPLATES[int(stream.integers(0, len(_FILLER_TEMPLATES)))]
            p1, p2 = _PREFIX_PAIRS[int(stream.integers(0, len(_PREFIX_PAIRS)))]
            sentence = template.format(
                obj=_OBJECTS[int(stream.integers(0, len(_OBJECTS)))],
                color=_COLORS[int(stream.integers(0, len(_COLORS)))],
                rel=_RELATIONS[int(stream.integers(0, len(_RELATIONS)))],
                verb=_VERBS[int(stream.integers(0, len(_VERBS)))],
                p1=p1,
                p2=p2,
            )
        sentences.append(sentence)
    return PretrainCorpus(tuple(sentences))


@dataclass(frozen=True)
class DemoEpisode:
    prompt: str
    prompt_ids: tuple
    steps: tuple
    speed: str
    height: str
    positions: tuple

    def actions(self):
        return [action for _x, _y, action in self.steps]


def demo_prompt(index, height):
    """高度风格为 medium 以外时低/高搬运任务与两种盘子任务交替，medium 只轮换盘子任务。"""
    if height == "medium":
        return SPEED_TASK_PROMPTS[index % len(SPEED_TASK_PROMPTS)]
    return (HEIGHT_TASK_PROMPT, SPEED_TASK_PROMPTS[0], HEIGHT_TASK_PROMPT, SPEED_TASK_PROMPTS[1])[index % 4]


def gen_demos(seed, n_per_style, vocab=None, horizon=40):
    """每种 (速度, 高度) 风格生成 n_per_style 条专家示教。"""
    if n_per_style < 1:
        raise PreconditionError("n_per_style 至少为 1")
    vocab = vocab or default_vocab()
    episodes = []
    for speed in SPEEDS:
        for height in HEIGHTS:
            for index in range(n_per_style):
                prompt = demo_prompt(index, height)
                if any(fold(word) in STYLE_WORDS for word in prompt.split()):
                    raise PreconditionError(f"示教提示词包含风格词: {prompt}")
                placement_seed = int(SeededStream(seed, f"demo/{speed}/{height}/{index}").integers(0, 2**31 - 1))
                task = make_task(prompt, placement_seed, speed, height, horizon)
                trace = expert_rollout(task, vocab)
                steps = []
                for (x, y), action in zip(trace.positions, trace.actions):
                    obs_x, obs_y = vocab.obs_tokens(x, y)
                    steps.append((obs_x, obs_y, action))
                episodes.append(DemoEpisode(
                    prompt=prompt,
                    prompt_ids=tuple(vocab.encode(prompt)),
                    steps=tuple(steps),
                    speed=speed,
                    height=height,
                    positions=tuple(trace.positions),
                ))
    return episodes


def demo_windows(episode, window=HISTORY_WINDOW):
    """把一条示教切成训练序列：<bos> + 提示词 + 至多 window+1 个 (obs_x, obs_y, action) 三元组。

    推演时第 t 步的上下文与从 t-window 开始的窗口前缀逐 token 一致。
    """
    sequences = []
    count = len(episode.steps)
    for start in range(max(1, count - window)):
        chunk = episode.steps[start:start + window + 1]
        tokens = [BOS_ID] + list(episode.prompt_ids)
        for obs_x, obs_y, action in chunk:
            tokens += [obs_x, obs_y, action]
        sequences.append(tokens)
    return sequences


def demo_sequences(episodes, window=HISTORY_WINDOW):
    sequences = []
    for episode in episodes:
        sequences.extend(demo_windows(episode, window))
    return sequences


def rollout_context(vocab, episode, step, window=HISTORY_WINDOW):
    """示教第 step 步在推演时看到的上下文，用于对齐测试与保留集评估。"""
    history = list(episode.steps[:step])
    x, y = episode.positions[step]
    return build_context(vocab, episode.prompt_ids, history, (x, y), window)


@dataclass(frozen=True)
class Batch:
    """输入 token、下一 token 标签与位置掩码，形状均为 (B, T)。"""

    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    @property
    def size(self):
        return self.tokens.shape[0]


def make_batch(sequences, mask_fn=None):
    """右侧补齐 <pad>；mask_fn(target_id) 决定标签位置是否计入损失，补齐位置恒不计入。"""
    if not sequences:
        raise EmptyBatch("批次不能为空")
    width = max(len(sequence) for sequence in sequences) - 1
    if width < 1:
        raise EmptyBatch("序列长度至少为 2")
    tokens = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    targets = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=np.float64)
    for row, sequence in enumerate(sequences):
        length = len(sequence) - 1
        tokens[row, :length] = sequence[:-1]
        targets[row, :length] = sequence[1:]
        for position in range(length):
            if mask_fn is None or mask_fn(sequence[position + 1]):
                mask[row, position] = 1.0
    return Batch(tokens, targets, mask)
