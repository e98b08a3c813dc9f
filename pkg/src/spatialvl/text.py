"""Word-level vocabulary and the joint text + visual sequence layout.

Every sequence is laid out as::

    [CLS] question... answer... [IMG] v_0 ... v_{k-1} [SEP]
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from spatialvl.errors import ValidationError

CLS, IMG, SEP, MASK, PAD, UNK = 0, 1, 2, 3, 4, 5
SPECIAL_TOKENS = ("[CLS]", "[IMG]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)

TYPE_QUESTION, TYPE_ANSWER, TYPE_VISUAL = 0, 1, 2
NUM_TYPES = 3

MAX_TEXT_TOKENS = 64
MAX_VISUAL_SLOTS = 16


class Vocabulary:
    """Dense word -> id map with the special tokens pinned to ids 0..5."""

    def __init__(self, words: Iterable[str] = ()):
        self._words: list[str] = list(SPECIAL_TOKENS)
        self._ids: dict[str, int] = {w: i for i, w in enumerate(self._words)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if not word or any(c.isspace() for c in word):
            raise ValidationError(f"vocabulary words must be non-empty and whitespace-free: {word!r}")
        if word not in self._ids:
            self._ids[word] = len(self._words)
            self._words.append(word)
        return self._ids[word]

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._words == other._words

    @property
    def words(self) -> list[str]:
        return list(self._words[NUM_SPECIAL:])

    def id(self, word: str) -> int:
        return self._ids.get(word, UNK)

    def word(self, token_id: int) -> str:
        return self._words[token_id]

    def tokenize(self, words: Sequence[str]) -> list[int]:
        return [self._ids.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._words[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.splitlines() if line)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    token_ids: np.ndarray
    type_ids: np.ndarray
    text_positions: np.ndarray
    is_visual: np.ndarray
    object_index: np.ndarray
    num_question: int
    num_answer: int

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def num_text(self) -> int:
        return self.num_question + self.num_answer

    @property
    def img_slot(self) -> int:
        return 1 + self.num_text

    @property
    def sep_slot(self) -> int:
        return len(self) - 1

    @property
    def text_slots(self) -> np.ndarray:
        return np.arange(1, 1 + self.num_text)

    @property
    def visual_slots(self) -> np.ndarray:
        return np.arange(self.img_slot + 1, self.sep_slot)

    @property
    def num_visual(self) -> int:
        return self.sep_slot - self.img_slot - 1


def encode_sequence(
    question_ids: Sequence[int],
    answer_ids: Sequence[int],
    num_objects: int,
    max_text: int = MAX_TEXT_TOKENS,
    max_visual: int = MAX_VISUAL_SLOTS,
) -> TokenSequence:
    nq, na = len(question_ids), len(answer_ids)
    if nq + na > max_text:
        raise ValidationError(f"text length {nq + na} exceeds max_text={max_text}")
    if not 1 <= num_objects <= max_visual:
        raise ValidationError(f"object count {num_objects} outside 1..max_visual={max_visual}")
    n_txt = nq + na
    length = n_txt + num_objects + 3
    token_ids = np.full(length, PAD, dtype=np.int64)
    type_ids = np.full(length, TYPE_QUESTION, dtype=np.int64)
    positions = np.zeros(length, dtype=np.int64)
    is_visual = np.zeros(length, dtype=bool)
    object_index = np.full(length, -1, dtype=np.int64)

    token_ids[0] = CLS
    token_ids[1 : 1 + nq] = question_ids
    token_ids[1 + nq : 1 + n_txt] = answer_ids
    type_ids[1 + nq : 1 + n_txt] = TYPE_ANSWER
    positions[: n_txt + 2] = np.arange(n_txt + 2)

    img = 1 + n_txt
    token_ids[img] = IMG
    type_ids[img:] = TYPE_VISUAL
    is_visual[img + 1 : length - 1] = True
    object_index[img + 1 : length - 1] = np.arange(num_objects)
    token_ids[length - 1] = SEP
    positions[length - 1] = n_txt + 2
    return TokenSequence(token_ids, type_ids, positions, is_visual, object_index, nq, na)
