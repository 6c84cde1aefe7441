"""二维拾取放置环境与脚本专家。

末端执行器在单位方框内移动；距物体每轴 0.05 以内自动拾取，携带时距目标每轴 0.05 以内放下。
放下后任务完成，之后任何动作都不再移动末端。
"""

import math
from dataclasses import dataclass, replace

from model.vocab import default_vocab
from utils.errors import PreconditionError
from utils.numerics import SeededStream


TOLERANCE = 0.05
_EPS = 1e-9
DEFAULT_HORIZON = 40

SPEEDS = {"slow": 0.10, "medium": 0.20, "fast": 0.30}
HEIGHTS = {"low": 0.2, "medium": 0.5, "high": 0.8}

START_POSITION = (0.1, 0.3)
OBJECT_POSITION = (0.3, 0.2)

# 提示词决定目标位置；提示词中不含任何风格词。
PROMPT_GOALS = {
    "place penguin in basket": (0.75, 0.2),
    "place seal on blue plate": (0.8, 0.2),
    "place seal on white plate": (0.65, 0.2),
}
HEIGHT_TASK_PROMPT = "place penguin in basket"
SPEED_TASK_PROMPTS = ("place seal on blue plate", "place seal on white plate")


@dataclass(frozen=True)
class EnvState:
    x: float
    y: float
    carrying: bool
    object_x: float
    object_y: float
    goal_x: float
    goal_y: float
    step: int = 0
    delivered: bool = False
    peak_y: float = 0.0

    @property
    def position(self):
        return (self.x, self.y)

    @property
    def done(self):
        return self.delivered


@dataclass(frozen=True)
class TaskSpec:
    prompt: str
    start: tuple
    object_position: tuple
    goal: tuple
    horizon: int = DEFAULT_HORIZON
    speed: str = "medium"
    height: str = "medium"

    def __post_init__(self):
        if self.speed not in SPEEDS:
            raise PreconditionError(f"未知的速度风格: {self.speed}")
        if self.height not in HEIGHTS:
            raise PreconditionError(f"未知的高度风格: {self.height}")
        if self.horizon < 1:
            raise PreconditionError("horizon 必须为正")

    @property
    def apex(self):
        return ((self.object_position[0] + self.goal[0]) / 2.0, HEIGHTS[self.height])

    @property
    def step_size(self):
        return SPEEDS[self.speed]

    def initial_state(self):
        return EnvState(
            x=self.start[0], y=self.start[1], carrying=False,
            object_x=self.object_position[0], object_y=self.object_position[1],
            goal_x=self.goal[0], goal_y=self.goal[1],
        )


def make_task(prompt, seed, speed="medium", height="medium", horizon=DEFAULT_HORIZON):
    """按提示词布置场景；种子只在 ±0.05 内扰动起点、物体与目标位置。"""
    if prompt not in PROMPT_GOALS:
        raise PreconditionError(f"未知的任务提示词: {prompt}")
    stream = SeededStream(seed, f"placement/{prompt}")
    jitter = stream.uniform(-TOLERANCE, TOLERANCE, 6)

    def place(base, offset):
        return (_clamp(base[0] + jitter[offset]), _clamp(base[1] + jitter[offset + 1]))

    return TaskSpec(
        prompt=prompt,
        start=place(START_POSITION, 0),
        object_position=place(OBJECT_POSITION, 2),
        goal=place(PROMPT_GOALS[prompt], 4),
        horizon=horizon,
        speed=speed,
        height=height,
    )


def _clamp(value):
    return min(1.0, max(0.0, float(value)))


def _near(ax, ay, bx, by):
    return abs(ax - bx) <= TOLERANCE + _EPS and abs(ay - by) <= TOLERANCE + _EPS


def env_step(state, token, vocab=None):
    vocab = vocab or default_vocab()
    dx, dy = vocab.decode_action(token)
    if state.delivered:
        return replace(state, step=state.step + 1)
    if state.carrying and _near(state.x, state.y, state.goal_x, state.goal_y):
        return replace(state, carrying=False, delivered=True, step=state.step + 1)
    x = _clamp(state.x + dx)
    y = _clamp(state.y + dy)
    carrying = state.carrying
    delivered = False
    peak_y = state.peak_y
    object_x, object_y = state.object_x, state.object_y
    if not carrying and _near(x, y, object_x, object_y):
        carrying = True
        peak_y = y
    elif carrying:
        peak_y = max(peak_y, y)
    if carrying:
        object_x, object_y = x, y
        if _near(x, y, state.goal_x, state.goal_y):
            carrying = False
            delivered = True
    return replace(
        state, x=x, y=y, carrying=carrying, delivered=delivered,
        object_x=object_x, object_y=object_y, peak_y=peak_y, step=state.step + 1,
    )


def current_waypoint(state, task):
    if state.delivered:
        return state.position
    if not state.carrying:
        return (state.object_x, state.object_y)
    apex_x, apex_y = task.apex
    if state.peak_y < apex_y - TOLERANCE:
        return (apex_x, apex_y)
    return (state.goal_x, state.goal_y)


def expert_action(state, task, vocab=None):
    """朝当前路点移动，位移截断到风格步长后按轴吸附到动作桶。"""
    vocab = vocab or default_vocab()
    target_x, target_y = current_waypoint(state, task)
    dx = target_x - state.x
    dy = target_y - state.y
    distance = math.hypot(dx, dy)
    if distance > task.step_size:
        scale = task.step_size / distance
        dx *= scale
        dy *= scale
    return vocab.encode_action(dx, dy)


def task_success(state):
    return state.delivered and _near(state.object_x, state.object_y, state.goal_x, state.goal_y)
