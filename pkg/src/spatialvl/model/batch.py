"""Padding a list of encoded sequences into dense batch arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spatialvl.errors import ValidationError
from spatialvl.text import MASK, PAD, TokenSequence


@dataclass(frozen=True, eq=False)
class SequenceInput:
    """One sequence with its visual inputs and any input-side masking applied.

    ``mlm_slots`` are sequence slots whose token becomes [MASK];
    ``feature_masked`` and ``position_masked`` are object indices whose
    feature is zeroed or whose position term is dropped.
    """

    seq: TokenSequence
    positions: np.ndarray
    features: np.ndarray
    mlm_slots: tuple[int, ...] = ()
    feature_masked: tuple[int, ...] = ()
    position_masked: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class Batch:
    token_ids: np.ndarray
    type_ids: np.ndarray
    positions: np.ndarray
    is_visual: np.ndarray
    key_valid: np.ndarray
    features: np.ndarray
    boxes5: np.ndarray
    pos_keep: np.ndarray
    lengths: np.ndarray
    img_slot: np.ndarray

    @property
    def size(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[1])

    def object_slot(self, b: int, k: int) -> int:
        return int(self.img_slot[b]) + 1 + k


def collate(items: list[SequenceInput], feature_dim: int) -> Batch:
    if not items:
        raise ValidationError("cannot collate an empty batch")
    B = len(items)
    T = max(len(it.seq) for it in items)
    token_ids = np.full((B, T), PAD, dtype=np.int64)
    type_ids = np.zeros((B, T), dtype=np.int64)
    positions = np.zeros((B, T), dtype=np.int64)
    is_visual = np.zeros((B, T), dtype=bool)
    key_valid = np.zeros((B, T), dtype=bool)
    features = np.zeros((B, T, feature_dim))
    boxes5 = np.zeros((B, T, 5))
    pos_keep = np.zeros((B, T), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    img_slot = np.zeros(B, dtype=np.int64)
    for b, it in enumerate(items):
        s = it.seq
        n = len(s)
        k = s.num_visual
        if it.positions.shape != (k, 5):
            raise ValidationError(f"item {b}: positions shape {it.positions.shape}, expected ({k}, 5)")
        if it.features.shape != (k, feature_dim):
            raise ValidationError(
                f"item {b}: features shape {it.features.shape}, expected ({k}, {feature_dim})"
            )
        token_ids[b, :n] = s.token_ids
        for slot in it.mlm_slots:
            if not 1 <= slot <= s.num_text:
                raise ValidationError(f"item {b}: MLM slot {slot} is not a text token")
            token_ids[b, slot] = MASK
        type_ids[b, :n] = s.type_ids
        positions[b, :n] = s.text_positions
        is_visual[b, :n] = s.is_visual
        key_valid[b, :n] = True
        vs = slice(s.img_slot + 1, s.img_slot + 1 + k)
        feats = it.features.copy()
        if it.feature_masked:
            feats[list(it.feature_masked)] = 0.0
        features[b, vs] = feats
        boxes5[b, vs] = it.positions
        keep = np.ones(k, dtype=bool)
        if it.position_masked:
            keep[list(it.position_masked)] = False
        pos_keep[b, vs] = keep
        lengths[b] = n
        img_slot[b] = s.img_slot
    return Batch(token_ids, type_ids, positions, is_visual, key_valid, features, boxes5, pos_keep,
                 lengths, img_slot)
