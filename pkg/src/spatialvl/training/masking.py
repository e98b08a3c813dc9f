"""Per-example masking plans and the model inputs they produce."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from spatialvl.dataset import Example
from spatialvl.errors import ValidationError
from spatialvl.geometry import RelationMetric
from spatialvl.graph import build_graph, eligible_opr_nodes, sample_src_pairs
from spatialvl.model.batch import SequenceInput
from spatialvl.text import TokenSequence, Vocabulary, encode_sequence

log = logging.getLogger(__name__)

MLM_RATE = 0.15
MRC_RATE = 0.15
OPR_RATE = 0.50
MAX_EMPTY_DRAWS = 16


@dataclass(frozen=True)
class MaskPlan:
    """Which inputs are hidden, and which targets are scored, for one example.

    ``trials`` / ``hits`` count every Bernoulli draw made while building the
    plan, empty redraws included.
    """

    task: str
    mlm_slots: tuple[int, ...] = ()
    feature_masked: tuple[int, ...] = ()
    position_masked: tuple[int, ...] = ()
    src_pairs: tuple[tuple[int, int, int | float], ...] = ()
    trials: int = 0
    hits: int = 0
    attempts: int = 1


def encode_example(example: Example, vocab: Vocabulary, answer=None, max_text=64, max_visual=16) -> TokenSequence:
    """Question plus ``answer`` (the correct candidate when None)."""
    answer = example.answer if answer is None else answer
    return encode_sequence(
        vocab.tokenize(example.question),
        vocab.tokenize(answer),
        len(example.scene.objects),
        max_text=max_text,
        max_visual=max_visual,
    )


def _bernoulli_plan(n: int, rate: float, rng: np.random.Generator, retries: int):
    """Redraw until at least one of ``n`` items is selected; None after ``retries`` empties."""
    trials = hits = 0
    for attempt in range(1, retries + 1):
        draw = rng.random(n) < rate
        trials += n
        k = int(draw.sum())
        hits += k
        if k:
            return np.flatnonzero(draw), trials, hits, attempt
    return None, trials, hits, retries


def make_mask_plan(
    example: Example,
    task: str,
    rng: np.random.Generator,
    seq: TokenSequence | None = None,
    metric=RelationMetric.IOU_CLASS10,
    num_pairs: int | None = None,
    retries: int = MAX_EMPTY_DRAWS,
) -> MaskPlan | None:
    """Draw a plan for ``task``; returns None (and logs) when nothing can be masked."""
    n_obj = len(example.scene.objects)
    if task == "MLM":
        if seq is None:
            raise ValidationError("MLM plans need the encoded sequence")
        text = seq.text_slots
        picks, trials, hits, attempts = _bernoulli_plan(len(text), MLM_RATE, rng, retries)
        if picks is None:
            log.warning("example %d: no MLM mask after %d draws, skipped", example.example_id, retries)
            return None
        return MaskPlan(task, mlm_slots=tuple(int(text[i]) for i in picks), trials=trials, hits=hits,
                        attempts=attempts)
    if task in ("MRC", "MRFR"):
        picks, trials, hits, attempts = _bernoulli_plan(n_obj, MRC_RATE, rng, retries)
        if picks is None:
            log.warning("example %d: no %s mask after %d draws, skipped", example.example_id, task, retries)
            return None
        return MaskPlan(task, feature_masked=tuple(int(i) for i in picks), trials=trials, hits=hits,
                        attempts=attempts)
    if task == "OPR":
        eligible = sorted(eligible_opr_nodes(example.scene))
        if not eligible:
            log.warning("example %d: no OPR-eligible objects, skipped", example.example_id)
            return None
        picks, trials, hits, attempts = _bernoulli_plan(len(eligible), OPR_RATE, rng, retries)
        if picks is None:
            log.warning("example %d: no OPR mask after %d draws, skipped", example.example_id, retries)
            return None
        return MaskPlan(task, position_masked=tuple(eligible[i] for i in picks), trials=trials, hits=hits,
                        attempts=attempts)
    if task == "SRC":
        if n_obj < 2:
            log.warning("example %d: SRC needs two objects, skipped", example.example_id)
            return None
        graph = build_graph(example.scene, metric)
        k = n_obj if num_pairs is None else num_pairs
        pairs = sample_src_pairs(graph, k, rng)
        return MaskPlan(task, src_pairs=tuple((i, j, lab.value) for i, j, lab in pairs))
    raise ValidationError(f"unknown task {task!r}")


def sequence_input(example: Example, seq: TokenSequence, plan: MaskPlan | None = None) -> SequenceInput:
    scene = example.scene
    if plan is None:
        return SequenceInput(seq, scene.position_array(), scene.features)
    return SequenceInput(
        seq,
        scene.position_array(),
        scene.features,
        mlm_slots=plan.mlm_slots,
        feature_masked=plan.feature_masked,
        position_masked=plan.position_masked,
    )
