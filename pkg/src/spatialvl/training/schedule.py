"""Task interleaving, learning-rate schedule and AdamW."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from spatialvl import kernels
from spatialvl.errors import ValidationError

TASKS = ("OPR", "SRC", "MLM", "MRC", "MRFR")
DEFAULT_RATIOS = {"OPR": 1, "SRC": 1, "MLM": 10, "MRC": 1, "MRFR": 1}

# ablation arms, named after the pre-training rows they reproduce
ARMS = {
    "MLM+MRC": ("MLM", "MRC"),
    "MLM+MRC+MRFR": ("MLM", "MRC", "MRFR"),
    "MLM+MRC+OPR": ("MLM", "MRC", "OPR"),
    "MLM+MRC+SRC": ("MLM", "MRC", "SRC"),
    "MLM+MRC+SRC+OPR": ("MLM", "MRC", "SRC", "OPR"),
}
FULL_ARM = "MLM+MRC+SRC+OPR"


def arm_ratios(arm: str) -> dict[str, int]:
    """Per-cycle counts for an arm; absent tasks drop out and the cycle shortens."""
    if arm not in ARMS:
        raise ValidationError(f"unknown task set {arm!r}; valid arms: {', '.join(ARMS)}")
    wanted = set(ARMS[arm])
    return {t: DEFAULT_RATIOS[t] for t in ("OPR", "SRC", "MLM", "MRC", "MRFR") if t in wanted}


@dataclass
class TaskSchedule:
    """One task per step; each cycle is a seeded shuffle of the ratio multiset."""

    ratios: dict[str, int]
    total_steps: int
    seed: int = 0
    tasks: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValidationError("total_steps must be >= 0")
        for t, r in self.ratios.items():
            if t not in TASKS:
                raise ValidationError(f"unknown task {t!r}; valid: {', '.join(TASKS)}")
            if int(r) != r or r < 0:
                raise ValidationError(f"ratio for {t} must be a non-negative integer")
        cycle = [t for t, r in self.ratios.items() for _ in range(int(r))]
        if not cycle and self.total_steps:
            raise ValidationError("schedule has no tasks")
        rng = np.random.default_rng([self.seed, 0x5C4ED])
        tasks: list[str] = []
        while len(tasks) < self.total_steps:
            tasks.extend(cycle[i] for i in rng.permutation(len(cycle)))
        self.tasks = tasks[: self.total_steps]

    @property
    def cycle_length(self) -> int:
        return int(sum(self.ratios.values()))

    def counts(self) -> dict[str, int]:
        return {t: self.tasks.count(t) for t in self.ratios}

    def __len__(self) -> int:
        return self.total_steps

    def __iter__(self):
        return iter(self.tasks)


def warmup_steps(total_steps: int, warmup_fraction: float = 0.1) -> int:
    return int(round(total_steps * warmup_fraction))


def learning_rate(step: int, total_steps: int, peak: float, warmup_fraction: float = 0.1) -> float:
    """Linear warm-up to ``peak`` over the first 10% of steps, then linear decay to 0.

    ``step`` is 1-based: step ``warmup_steps`` gets the peak, step ``total_steps`` gets 0.
    """
    if not 1 <= step <= total_steps:
        raise ValidationError(f"step {step} outside 1..{total_steps}")
    w = warmup_steps(total_steps, warmup_fraction)
    if step <= w:
        return peak * step / w
    return peak * (total_steps - step) / (total_steps - w)


class AdamW:
    """Adam with decoupled weight decay, updating a parameter dict in place."""

    def __init__(self, params: dict[str, np.ndarray], weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        decay = 1.0 - lr * self.weight_decay
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValidationError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
            kernels.adamw_update(
                p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                lr, b1, b2, c1, c2, self.eps, decay,
            )
