"""Multi-seed ablation runs: pre-train each arm, fine-tune, evaluate, analyse."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from spatialvl.analysis import CorrelationReport, correlation_report, sample_examples
from spatialvl.config import RunConfig, model_config
from spatialvl.dataset import build_vocabulary, generate_dataset
from spatialvl.training import TaskSchedule, arm_ratios, finetune, pretrain

log = logging.getLogger(__name__)


@dataclass
class ArmResult:
    arm: str
    seed: int
    accuracy: float
    correlation: CorrelationReport | None = None
    pretrain_losses: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    pretrain_log: list = field(default_factory=list, repr=False)
    params: dict = field(default_factory=dict, repr=False)


def run_arm(run: RunConfig, arm: str, seed: int, analyse: bool = True) -> ArmResult:
    """One seed of one arm; every seed in ``run`` is replaced by ``seed``."""
    run = run.with_seed(seed)
    data = generate_dataset(run.data)
    vocab = build_vocabulary(run.data)
    cfg = model_config(run.model, run.data)
    train = [e for e in data if e.split == "train"]
    val = [e for e in data if e.split == "val"]
    t = run.train
    schedule = TaskSchedule(arm_ratios(arm), t.steps, run.seeds.train)
    timings = {}
    t0 = time.perf_counter()
    pre = pretrain(cfg, data, schedule, vocab, seed=run.seeds.train, lr=t.lr, batch_size=t.batch_size,
                   weight_decay=t.weight_decay, warmup_fraction=t.warmup_fraction, literal_kl=t.literal_kl,
                   src_pairs=t.src_pairs or None)
    timings["pretrain"] = time.perf_counter() - t0
    corr = None
    if analyse:
        t0 = time.perf_counter()
        sample = sample_examples(data, seed=run.seeds.analysis)
        corr = correlation_report(pre.params, cfg, vocab, sample)
        timings["analysis"] = time.perf_counter() - t0
    f = run.finetune
    t0 = time.perf_counter()
    ft = finetune(pre.params, cfg, vocab, train, val, f.steps, seed=run.seeds.finetune, lr=f.lr,
                  batch_size=f.batch_size, weight_decay=f.weight_decay, warmup_fraction=f.warmup_fraction,
                  train_encoder=f.train_encoder)
    timings["finetune"] = time.perf_counter() - t0
    tail = {task: float(pre.task_losses(task)[-50:].mean()) for task in arm_ratios(arm)}
    log.info("arm %s seed %d: accuracy %.4f", arm, seed, ft.accuracy)
    return ArmResult(arm, seed, float(ft.accuracy), corr, tail, timings, pre.log, pre.params)


def compare_arms(run: RunConfig, arms: Sequence[str], seeds: Sequence[int],
                 analyse: bool = True) -> dict[str, list[ArmResult]]:
    return {arm: [run_arm(run, arm, s, analyse) for s in seeds] for arm in arms}


def mean_accuracy(results: Sequence[ArmResult]) -> float:
    return float(np.mean([r.accuracy for r in results]))


def replace_steps(run: RunConfig, pretrain_steps: int | None = None, finetune_steps: int | None = None) -> RunConfig:
    train = run.train if pretrain_steps is None else dataclasses.replace(run.train, steps=pretrain_steps)
    ft = run.finetune if finetune_steps is None else dataclasses.replace(run.finetune, steps=finetune_steps)
    return dataclasses.replace(run, train=train, finetune=ft)
