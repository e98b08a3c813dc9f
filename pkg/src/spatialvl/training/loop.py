"""Pre-training over the alternating task schedule, and multiple-choice fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from spatialvl.dataset import Example
from spatialvl.errors import NumericError, ValidationError
from spatialvl.geometry import RelationMetric
from spatialvl.model import heads
from spatialvl.model.batch import SequenceInput, collate
from spatialvl.model.config import ModelConfig, init_params
from spatialvl.model.transformer import backward, forward, zero_grads
from spatialvl.text import TokenSequence, Vocabulary
from spatialvl.training import losses
from spatialvl.training.masking import MaskPlan, encode_example, make_mask_plan
from spatialvl.training.schedule import AdamW, TaskSchedule, learning_rate

log = logging.getLogger(__name__)

PRETRAIN_LR = 3e-4
FINETUNE_LR = 1e-4
BATCH_SIZE = 16


def stream(seed: int, tag: str) -> np.random.Generator:
    """Independent generator per (seed, purpose)."""
    return np.random.default_rng([seed, sum(ord(c) << (8 * i) for i, c in enumerate(tag))])


@dataclass
class Prepared:
    """Everything about an example that does not change between steps."""

    example: Example
    seq: TokenSequence
    positions: np.ndarray
    features: np.ndarray
    candidate_seqs: tuple[TokenSequence, ...] = ()


def prepare(examples: Sequence[Example], vocab: Vocabulary, cfg: ModelConfig, candidates: bool = False) -> list[Prepared]:
    out = []
    for ex in examples:
        seq = encode_example(ex, vocab, max_text=cfg.max_text, max_visual=cfg.max_visual)
        cands = ()
        if candidates:
            cands = tuple(
                encode_example(ex, vocab, c, max_text=cfg.max_text, max_visual=cfg.max_visual)
                for c in ex.candidates
            )
        out.append(Prepared(ex, seq, ex.scene.position_array(), ex.scene.features, cands))
    return out


def _input(p: Prepared, plan: MaskPlan | None, seq: TokenSequence | None = None) -> SequenceInput:
    seq = p.seq if seq is None else seq
    if plan is None:
        return SequenceInput(seq, p.positions, p.features)
    return SequenceInput(seq, p.positions, p.features, plan.mlm_slots, plan.feature_masked, plan.position_masked)


# --------------------------------------------------------------------------
# one pre-training task on one batch
# --------------------------------------------------------------------------


def task_targets(task: str, items: Sequence[Prepared], plans: Sequence[MaskPlan], img_slots: np.ndarray):
    """Slot indices and targets scored by ``task`` for a collated batch."""
    b_idx, t_idx, j_idx, targets = [], [], [], []
    for b, (p, plan) in enumerate(zip(items, plans)):
        img = int(img_slots[b])
        if task == "MLM":
            for slot in plan.mlm_slots:
                b_idx.append(b)
                t_idx.append(slot)
                targets.append(int(p.seq.token_ids[slot]))
        elif task in ("MRC", "MRFR"):
            for k in plan.feature_masked:
                b_idx.append(b)
                t_idx.append(img + 1 + k)
                obj = p.example.scene.objects[k]
                targets.append(obj.category_distribution if task == "MRC" else p.features[k])
        elif task == "OPR":
            for k in plan.position_masked:
                b_idx.append(b)
                t_idx.append(img + 1 + k)
                targets.append(p.positions[k])
        elif task == "SRC":
            for i, j, lab in plan.src_pairs:
                b_idx.append(b)
                t_idx.append(img + 1 + i)
                j_idx.append(img + 1 + j)
                targets.append(lab)
        else:
            raise ValidationError(f"unknown task {task!r}")
    return np.array(b_idx, dtype=np.int64), np.array(t_idx, dtype=np.int64), np.array(j_idx, dtype=np.int64), targets


def task_loss_and_grads(
    params,
    cfg: ModelConfig,
    task: str,
    items: Sequence[Prepared],
    plans: Sequence[MaskPlan],
    dropout_rng: np.random.Generator | None = None,
    literal_kl: bool = False,
):
    """Forward, loss and full backward for one task; returns ``(loss, grads)``."""
    batch = collate([_input(p, plan) for p, plan in zip(items, plans)], cfg.feature_dim)
    trace = forward(params, batch, cfg, dropout_rng)
    return _head_loss(params, cfg, task, trace, items, plans, literal_kl)


def _head_loss(params, cfg, task, trace, items, plans, literal_kl=False):
    b_idx, t_idx, j_idx, targets = task_targets(task, items, plans, trace.batch.img_slot)
    d_hidden = np.zeros_like(trace.hidden)
    g = zero_grads(params)
    slots = (b_idx, t_idx)
    if task == "MLM":
        out, cache = heads.mlm_forward(params, trace, slots)
        loss, d = losses.mlm_loss(out, np.array(targets, dtype=np.int64))
        heads.mlm_backward(params, cache, d, d_hidden, g)
    elif task == "MRC":
        out, cache = heads.mrc_forward(params, trace, slots)
        loss, d = losses.mrc_loss(out, np.stack(targets), literal=literal_kl)
        heads.mrc_backward(params, cache, d, d_hidden, g)
    elif task == "MRFR":
        out, cache = heads.mrfr_forward(params, trace, slots)
        loss, d = losses.mrfr_loss(out, np.stack(targets))
        heads.mrfr_backward(params, cache, d, d_hidden, g)
    elif task == "OPR":
        out, cache = heads.opr_forward(params, trace, slots)
        loss, d = losses.opr_loss(out, np.stack(targets))
        heads.opr_backward(params, cache, d, d_hidden, g)
    else:
        out, cache = heads.src_forward(params, trace, b_idx, t_idx, j_idx)
        if cfg.metric.is_regression:
            loss, d = losses.iou_regression_loss(out, np.array(targets, dtype=np.float64))
        else:
            loss, d = losses.src_loss(out, np.array(targets, dtype=np.int64))
        heads.src_backward(params, cache, d, d_hidden, g)
    backward(params, trace, d_hidden, g)
    return loss, g


# --------------------------------------------------------------------------
# pre-training
# --------------------------------------------------------------------------


@dataclass
class LossRecord:
    step: int
    task: str
    loss: float
    lr: float


@dataclass
class TrainResult:
    params: dict
    log: list[LossRecord] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    accuracy: float | None = None

    def task_losses(self, task: str) -> np.ndarray:
        return np.array([r.loss for r in self.log if r.task == task])


def pretrain(
    cfg: ModelConfig,
    examples: Sequence[Example],
    schedule: TaskSchedule,
    vocab: Vocabulary,
    seed: int = 0,
    params: dict | None = None,
    lr: float = PRETRAIN_LR,
    batch_size: int = BATCH_SIZE,
    weight_decay: float = 1e-2,
    warmup_fraction: float = 0.1,
    literal_kl: bool = False,
    src_pairs: int | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run ``schedule``: each step draws a fresh batch and trains one task.

    ``stop_after`` ends the run early without changing the learning-rate
    horizon, which stays ``len(schedule)``.
    """
    train = [e for e in examples if e.split == "train"] or list(examples)
    if not train:
        raise ValidationError("pre-training needs a non-empty dataset")
    if params is None:
        params = init_params(cfg, stream(seed, "init"))
    else:
        params = {k: v.copy() for k, v in params.items()}
    prepared = prepare(train, vocab, cfg)
    opt = AdamW(params, weight_decay=weight_decay)
    batch_rng = stream(seed, "batch")
    mask_rng = stream(seed, "mask")
    drop_rng = stream(seed, "dropout")
    metric = cfg.metric
    result = TrainResult(params)
    total = len(schedule)
    bs = min(batch_size, len(prepared))
    for step, task in enumerate(schedule, start=1):
        if stop_after is not None and step > stop_after:
            break
        lr_t = learning_rate(step, total, lr, warmup_fraction)
        picks = batch_rng.choice(len(prepared), size=bs, replace=False)
        items, plans = [], []
        for i in picks:
            p = prepared[int(i)]
            plan = make_mask_plan(p.example, task, mask_rng, p.seq, metric, src_pairs)
            if plan is not None:
                items.append(p)
                plans.append(plan)
        if not items:
            log.warning("step %d (%s): every example skipped, no update", step, task)
            result.skipped.append(step)
            continue
        loss, grads = task_loss_and_grads(params, cfg, task, items, plans, drop_rng, literal_kl)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite {task} loss at step {step}")
        opt.step(grads, lr_t)
        result.log.append(LossRecord(step, task, loss, lr_t))
    return result


# --------------------------------------------------------------------------
# multiple-choice fine-tuning and evaluation
# --------------------------------------------------------------------------


def _choice_batch(items: Sequence[Prepared], cfg: ModelConfig):
    inputs = []
    for p in items:
        for seq in p.candidate_seqs:
            inputs.append(SequenceInput(seq, p.positions, p.features))
    return collate(inputs, cfg.feature_dim)


def choice_scores(params, cfg: ModelConfig, items: Sequence[Prepared], dropout_rng=None):
    batch = _choice_batch(items, cfg)
    trace = forward(params, batch, cfg, dropout_rng)
    score, cache = heads.matching_forward(params, trace)
    return score.reshape(len(items), 4), trace, cache


def evaluate(params, cfg: ModelConfig, vocab: Vocabulary, examples: Sequence[Example], batch_size: int = 64):
    """Returns ``(accuracy, n_correct, n_total)``; first index wins score ties."""
    if not examples:
        raise ValidationError("evaluation needs at least one example")
    prepared = prepare(examples, vocab, cfg, candidates=True)
    correct = 0
    for start in range(0, len(prepared), batch_size):
        chunk = prepared[start : start + batch_size]
        scores, _, _ = choice_scores(params, cfg, chunk)
        pred = scores.argmax(axis=1)
        correct += int(sum(int(pred[i]) == p.example.correct for i, p in enumerate(chunk)))
    return correct / len(prepared), correct, len(prepared)


def finetune(
    params: dict,
    cfg: ModelConfig,
    vocab: Vocabulary,
    train: Sequence[Example],
    val: Sequence[Example],
    steps: int,
    seed: int = 0,
    lr: float = FINETUNE_LR,
    batch_size: int = BATCH_SIZE,
    weight_decay: float = 1e-2,
    warmup_fraction: float = 0.1,
    train_encoder: bool = True,
) -> TrainResult:
    """Cross-entropy over the four candidate scores; reports validation accuracy."""
    if not train:
        raise ValidationError("fine-tuning needs training examples")
    params = {k: v.copy() for k, v in params.items()}
    prepared = prepare(train, vocab, cfg, candidates=True)
    trainable = params if train_encoder else {k: params[k] for k in ("match.W", "match.b")}
    opt = AdamW(trainable, weight_decay=weight_decay)
    batch_rng = stream(seed, "ft-batch")
    drop_rng = stream(seed, "ft-dropout")
    result = TrainResult(params)
    bs = min(batch_size, len(prepared))
    for step in range(1, steps + 1):
        lr_t = learning_rate(step, steps, lr, warmup_fraction)
        picks = batch_rng.choice(len(prepared), size=bs, replace=False)
        items = [prepared[int(i)] for i in picks]
        scores, trace, cache = choice_scores(params, cfg, items, drop_rng)
        correct = np.array([p.example.correct for p in items])
        loss, d_scores = losses.matching_loss(scores, correct)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite MATCH loss at step {step}")
        d_hidden = np.zeros_like(trace.hidden)
        g = zero_grads(params)
        heads.matching_backward(params, cache, d_scores.reshape(-1), d_hidden, g)
        if train_encoder:
            backward(params, trace, d_hidden, g)
        opt.step({k: g[k] for k in trainable}, lr_t)
        result.log.append(LossRecord(step, "MATCH", loss, lr_t))
    if val:
        result.accuracy = evaluate(params, cfg, vocab, val)[0]
    return result


def write_loss_csv(path, records: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "task", "loss", "lr"])
        for r in records:
            w.writerow([r.step, r.task, repr(r.loss), repr(r.lr)])


def read_loss_csv(path) -> list[LossRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), r["task"], float(r["loss"]), float(r["lr"])) for r in rows]
