"""Token inventory shared by the data generator and the model."""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, Sequence

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"
COND_SUCCESS, COND_FAILURE, COND_NONE = "<cond_success>", "<cond_failure>", "<cond_none>"
SEP = "<sep>"
SPECIALS = (BOS, EOS, PAD, COND_SUCCESS, COND_FAILURE, COND_NONE, SEP)

SUCCESS_TEMPLATE = ("the", "robot", "succeeded", "at", "the", "task")
PREFIXES = (("i", "observe", "that"), ("i", "see", "that"))

# (name, template) indexed by failure-mode id
FAILURE_TEMPLATES = (
    ("gripper_not_closed", ("the", "robot", "did", "not", "close", "its", "gripper")),
    ("offset_y", ("the", "gripper", "moved", "with", "an", "offset", "along", "y")),
    ("dropped_midway", ("the", "robot", "dropped", "the", "item", "midway")),
    ("wrong_bin", ("the", "robot", "placed", "the", "item", "in", "the", "wrong", "bin")),
    ("item_damaged", ("the", "robot", "damaged", "the", "item")),
    ("collision", ("the", "robot", "arm", "collided", "with", "the", "bin")),
    ("no_grasp", ("the", "robot", "did", "not", "grasp", "the", "item")),
    ("spillage", ("the", "item", "contents", "spilled", "in", "the", "bin")),
)


def _word_tokens() -> list[str]:
    seen: list[str] = []
    for seq in (SUCCESS_TEMPLATE, *PREFIXES, *(t for _, t in FAILURE_TEMPLATES)):
        for tok in seq:
            if tok not in seen:
                seen.append(tok)
    return seen


class Vocab:
    """Ordered token list; specials occupy ids 0..6."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("special tokens must occupy the first ids in canonical order")
        self.tokens = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def bos(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return 1

    @property
    def pad(self) -> int:
        return 2

    def to_json(self) -> str:
        return json.dumps(list(self.tokens))

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(json.loads(text))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


DEFAULT_VOCAB = Vocab(list(SPECIALS) + _word_tokens())
