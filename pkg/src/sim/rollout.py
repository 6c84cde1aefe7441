"""策略推演与行为指标。"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from model.transformer import forward
from model.vocab import BOS_ID, default_vocab
from utils.errors import EmptyTrace, PreconditionError, TooShort
from utils.file_utils import write_csv, write_json

from .environment import env_step, expert_action, make_task, task_success


HISTORY_WINDOW = 8


def build_context(vocab, prompt_ids, history, observation, window=HISTORY_WINDOW):
    """<bos> + 提示词 + 最近 window 步的 (obs_x, obs_y, action) + 当前观察。"""
    tokens = [BOS_ID] + list(prompt_ids)
    recent = history[-window:] if window > 0 else []
    for obs_x, obs_y, action in recent:
        tokens += [obs_x, obs_y, action]
    tokens += list(vocab.obs_tokens(*observation))
    return tokens


@dataclass
class RolloutTrace:
    prompt: str
    positions: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    carrying: list = field(default_factory=list)
    intervention: dict = None
    success: bool = False

    def __post_init__(self):
        if self.positions and len(self.positions) != len(self.actions) + 1:
            raise PreconditionError("轨迹位置数必须等于动作数 + 1")

    def to_dict(self, vocab=None):
        vocab = vocab or default_vocab()
        return {
            "prompt": self.prompt,
            "positions": [[x, y] for x, y in self.positions],
            "actions": [vocab.surface(token) for token in self.actions],
            "carrying": list(self.carrying),
            "intervention": self.intervention,
            "success": self.success,
        }

    def csv_rows(self, vocab=None):
        vocab = vocab or default_vocab()
        rows = []
        for step, (x, y) in enumerate(self.positions):
            action = vocab.surface(self.actions[step]) if step < len(self.actions) else ""
            rows.append((step, float(x), float(y), action, int(self.carrying[step])))
        return rows

    def save(self, json_path, csv_path, vocab=None):
        write_json(json_path, self.to_dict(vocab))
        write_csv(csv_path, ("step", "x", "y", "action", "carrying"), self.csv_rows(vocab))


class GreedyPolicy:
    """在动作 token 区间内取 argmax 的贪心策略。"""

    def __init__(self, weights, vocab, intervention=None, window=HISTORY_WINDOW):
        self.weights = weights
        self.vocab = vocab
        self.intervention = intervention
        self.window = window
        self.start, self.stop = vocab.action_range

    def act(self, prompt_ids, history, observation):
        context = build_context(self.vocab, prompt_ids, history, observation, self.window)
        logits, _trace = forward(self.weights, context, self.intervention)
        return self.start + int(np.argmax(logits[-1, self.start:self.stop]))


def _run_episode(task, choose_action, vocab, intervention=None):
    prompt_ids = vocab.encode(task.prompt)
    state = task.initial_state()
    trace = RolloutTrace(prompt=task.prompt, intervention=intervention)
    trace.positions.append(state.position)
    trace.carrying.append(state.carrying)
    history = []
    while not state.done and state.step < task.horizon:
        token = choose_action(state, prompt_ids, history)
        obs_x, obs_y = vocab.obs_tokens(state.x, state.y)
        history.append((obs_x, obs_y, token))
        state = env_step(state, token, vocab)
        trace.actions.append(token)
        trace.positions.append(state.position)
        trace.carrying.append(state.carrying)
    trace.success = task_success(state)
    return trace


def rollout(weights, task, intervention=None, seed=None, vocab=None, window=HISTORY_WINDOW):
    """自回归贪心推演；seed 不为 None 时按种子重新布置场景。"""
    vocab = vocab or default_vocab()
    if weights.config.vocab_size != len(vocab):
        raise PreconditionError("模型与词表大小不一致")
    if seed is not None:
        task = make_task(task.prompt, seed, task.speed, task.height, task.horizon)
    policy = GreedyPolicy(weights, vocab, intervention, window)
    spec_dict = intervention.to_dict() if intervention is not None else None

    def choose(state, prompt_ids, history):
        return policy.act(prompt_ids, history, state.position)

    return _run_episode(task, choose, vocab, spec_dict)


def expert_rollout(task, vocab=None):
    vocab = vocab or default_vocab()

    def choose(state, _prompt_ids, _history):
        return expert_action(state, task, vocab)

    return _run_episode(task, choose, vocab)


def rollout_many(weights, task, intervention, seeds, workers=1, vocab=None):
    """按种子并行推演，结果顺序与 seeds 一致。"""
    tasks = [make_task(task.prompt, seed, task.speed, task.height, task.horizon) for seed in seeds]
    return rollout_tasks(weights, tasks, intervention, workers, vocab)


def rollout_tasks(weights, tasks, intervention=None, workers=1, vocab=None):
    """对已布置好的任务列表逐一推演；提示词可与布置时不同（如前置了概念词）。"""
    vocab = vocab or default_vocab()
    if workers <= 1:
        return [rollout(weights, task, intervention, None, vocab) for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(lambda task: rollout(weights, task, intervention, None, vocab), tasks))


def max_height(trace):
    if not trace.positions:
        raise EmptyTrace("轨迹为空")
    return max(float(y) for _x, y in trace.positions)


@dataclass(frozen=True)
class Displacements:
    per_step: tuple
    mean: float
    cumulative: tuple

    @property
    def total(self):
        return self.cumulative[-1] if self.cumulative else 0.0


def step_displacements(trace):
    """相邻位置的欧氏距离、均值与累计和。"""
    if len(trace.positions) < 2:
        raise TooShort("至少需要 2 个位置才能计算位移")
    positions = np.asarray(trace.positions, dtype=np.float64)
    per_step = np.sqrt(np.sum(np.diff(positions, axis=0) ** 2, axis=1))
    cumulative = np.cumsum(per_step)
    return Displacements(tuple(per_step.tolist()), float(np.mean(per_step)), tuple(cumulative.tolist()))


def y_displacement(trace):
    """最高点相对起点的上升量。"""
    if not trace.positions:
        raise EmptyTrace("轨迹为空")
    return max_height(trace) - float(trace.positions[0][1])
