"""固定布局词表与动作 token 编解码。

布局（共 228 个 id）：4 个特殊 token、128 个语义词、32 个观察 token（x/y 各 16 桶）、
64 个动作 token（8×8 网格，文本形式为 "<Axy>"）。
"""

import numpy as np

from utils.errors import NotAnActionToken, PreconditionError


SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

ACTION_BINS = 8
ACTION_LIMIT = 0.35
ACTION_CENTERS = tuple(round(-ACTION_LIMIT + 0.1 * index, 2) for index in range(ACTION_BINS))
OBS_BINS = 16


def surface_variants(word):
    """大小写与前导空格变体，模拟子词分词器中同一词的多个 token。"""
    return (word, word.capitalize(), word.upper(), " " + word, " " + word.capitalize())


VARIANT_WORDS = ("fast", "slow", "high", "low", "up", "down")

LEXICONS = {
    "fast": surface_variants("fast") + ("quick", "quickly", "rapid", "rapidly", "swift", "hurry", "risk", "speed"),
    "slow": surface_variants("slow") + ("slowly", "careful", "carefully", "gentle", "gently", "safe", "steady", "calm"),
    "high": surface_variants("high") + ("higher", "tall", "above", "lift", "raise", "top"),
    "low": surface_variants("low") + ("lower", "below", "under", "beneath", "bottom", "ground"),
    "up": surface_variants("up") + ("upward", "rise", "climb", "ascend"),
    "down": surface_variants("down") + ("downward", "descend", "drop", "fall"),
    "side": ("left", "Left", "right", "Right", "forward", "back"),
}

TASK_WORDS = (
    "place", "pick", "put", "move", "moves", "carry", "grasp", "release", "the", "a", "an",
    "seal", "penguin", "basket", "plate", "blue", "white", "red", "green", "block", "cube", "toy",
    "on", "in", "into", "onto", "to", "and", "then", "it", "arm", "robot", "gripper", "hand",
    "object", "table", "goes", "is", "very", "with", "of", "at", "toward", "from", "now", "slightly",
)

# 共享 3 字符前缀的词，用于构造“非语义”模式。
PREFIX_WORDS = ("con", "cont", "contact", "control", "convey", "pre", "press", "prefer", "present", "preview")

SEMANTIC_WORDS = tuple(word for family in LEXICONS.values() for word in family) + TASK_WORDS + PREFIX_WORDS

# 风格词：示教提示词中不得出现。
STYLE_WORDS = frozenset(
    word.strip().casefold() for family in ("fast", "slow", "high", "low") for word in LEXICONS[family]
)


def fold(surface):
    """大小写折叠并去除首尾空白后的表面形式。"""
    return surface.strip().casefold()


class TokenVocab:
    """id 与表面文本的双向映射，以及各区域的边界。"""

    def __init__(self, surfaces, regions, lexicons):
        self.surfaces = tuple(surfaces)
        self.regions = {name: (int(start), int(stop)) for name, (start, stop) in regions.items()}
        self.lexicons = {name: tuple(words) for name, words in lexicons.items()}
        self._ids = {}
        for index, surface in enumerate(self.surfaces):
            if surface in self._ids:
                raise PreconditionError(f"词表中存在重复 token: {surface!r}")
            self._ids[surface] = index
        covered = sorted(self.regions.values())
        cursor = 0
        for start, stop in covered:
            if start != cursor:
                raise PreconditionError("词表区域必须互不相交且覆盖全部 id")
            cursor = stop
        if cursor != len(self.surfaces):
            raise PreconditionError("词表区域必须互不相交且覆盖全部 id")

    @classmethod
    def default(cls):
        if len(SEMANTIC_WORDS) != 128:
            raise PreconditionError(f"语义词数量应为 128，当前为 {len(SEMANTIC_WORDS)}")
        observation = [f"<X{index:02d}>" for index in range(OBS_BINS)] + [f"<Y{index:02d}>" for index in range(OBS_BINS)]
        action = [f"<A{x}{y}>" for x in range(ACTION_BINS) for y in range(ACTION_BINS)]
        surfaces = list(SPECIAL_TOKENS) + list(SEMANTIC_WORDS) + observation + action
        semantic_stop = len(SPECIAL_TOKENS) + len(SEMANTIC_WORDS)
        observation_stop = semantic_stop + len(observation)
        regions = {
            "special": (0, len(SPECIAL_TOKENS)),
            "semantic": (len(SPECIAL_TOKENS), semantic_stop),
            "observation": (semantic_stop, observation_stop),
            "action": (observation_stop, observation_stop + len(action)),
        }
        return cls(surfaces, regions, LEXICONS)

    def __len__(self):
        return len(self.surfaces)

    @property
    def action_range(self):
        return self.regions["action"]

    def surface(self, token_id):
        return self.surfaces[token_id]

    def token_id(self, surface):
        return self._ids.get(surface, UNK_ID)

    def encode(self, text):
        """按空白切分文本并逐词查表，未知词映射为 <unk>。"""
        return [self.token_id(word) for word in text.split()]

    def decode(self, ids):
        return " ".join(self.surfaces[token_id] for token_id in ids)

    def in_region(self, token_id, region):
        start, stop = self.regions[region]
        return start <= token_id < stop

    def is_action(self, token_id):
        return self.in_region(token_id, "action")

    def folded_ids(self, words):
        """返回折叠表面形式属于 words 的全部 token id。"""
        targets = {fold(word) for word in words}
        return [index for index, surface in enumerate(self.surfaces) if fold(surface) in targets]

    def encode_action(self, dx, dy):
        """每轴截断到 [-0.35, 0.35] 后取最近的桶中心。"""
        start, _stop = self.action_range
        return start + _action_bin(dx) * ACTION_BINS + _action_bin(dy)

    def decode_action(self, token_id):
        if not self.is_action(token_id):
            raise NotAnActionToken(f"token {token_id} 不是动作 token")
        offset = token_id - self.action_range[0]
        return ACTION_CENTERS[offset // ACTION_BINS], ACTION_CENTERS[offset % ACTION_BINS]

    def obs_tokens(self, x, y):
        start, _stop = self.regions["observation"]
        return start + _obs_bin(x), start + OBS_BINS + _obs_bin(y)

    def to_dict(self):
        return {
            "surfaces": list(self.surfaces),
            "regions": {name: list(bounds) for name, bounds in self.regions.items()},
            "lexicons": {name: list(words) for name, words in self.lexicons.items()},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data["surfaces"], {name: tuple(bounds) for name, bounds in data["regions"].items()}, data["lexicons"])


_TIE_TOLERANCE = 1e-9


def _action_bin(value):
    """最近的桶中心；恰在两桶之间时取幅度较大者，0 取负侧。"""
    clamped = min(ACTION_LIMIT, max(-ACTION_LIMIT, float(value)))
    distances = np.abs(np.asarray(ACTION_CENTERS) - clamped)
    tied = np.flatnonzero(distances <= distances.min() + _TIE_TOLERANCE)
    return int(max(tied, key=lambda index: (abs(ACTION_CENTERS[index]), -index)))


def _obs_bin(value):
    return min(OBS_BINS - 1, max(0, int(float(value) * OBS_BINS)))


_DEFAULT_VOCAB = None


def default_vocab():
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = TokenVocab.default()
    return _DEFAULT_VOCAB


def encode_action(dx, dy):
    return default_vocab().encode_action(dx, dy)


def decode_action(token_id):
    return default_vocab().decode_action(token_id)
