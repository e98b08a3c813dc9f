"""Numba vs numpy timings for each kernel and for one pre-training step.

    python3 benchmarks/bench_kernels.py [--repeat N] [--skip-step]

Kernel timings call both variants directly. The end-to-end step runs in a
subprocess per backend because the dispatch is fixed at import time by
``SPATIALVL_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from spatialvl import kernels

STEP_SNIPPET = """
import time, numpy as np
from spatialvl.config import RunConfig, model_config
from spatialvl.dataset import build_vocabulary, generate_dataset
from spatialvl.training import TaskSchedule, arm_ratios, pretrain
run = RunConfig()
spec = run.data.__class__(num_examples=200)
data = generate_dataset(spec)
cfg = model_config(run.model, spec)
vocab = build_vocabulary(spec)
pretrain(cfg, data, TaskSchedule(arm_ratios("MLM+MRC+SRC+OPR"), 13, 0), vocab)  # warm-up and JIT
t = time.perf_counter()
pretrain(cfg, data, TaskSchedule(arm_ratios("MLM+MRC+SRC+OPR"), {steps}, 0), vocab)
print((time.perf_counter() - t) / {steps})
"""


def kernel_cases(rng):
    """(name, args builder) for shapes seen in a batch-16 toy step."""
    rows, h, t = 16 * 40, 64, 40
    x = rng.normal(size=(rows, h))
    g = np.ones(h)
    b = np.zeros(h)
    _, xhat, rstd = kernels.layernorm_forward_np(x, g, b, 1e-5)
    scores = rng.normal(size=(16 * 4 * t, t))
    probs = kernels.softmax_forward_np(scores)
    u = rng.normal(size=(rows, 256))
    xy = rng.uniform(0, 50, (16, 2))
    boxes = np.hstack([xy, xy + rng.uniform(1, 50, (16, 2))])
    table = np.zeros((128, h))
    idx = rng.integers(0, 128, rows)
    n = 100_000
    p, gr, m, v = (rng.normal(size=n) for _ in range(4))
    v = np.abs(v)
    return [
        ("layernorm_forward", lambda: (x, g, b, 1e-5)),
        ("layernorm_backward", lambda: (x, xhat, rstd, g)),
        ("softmax_forward", lambda: (scores,)),
        ("softmax_backward", lambda: (probs, scores)),
        ("gelu_forward", lambda: (u,)),
        ("gelu_backward", lambda: (u, u)),
        ("pairwise_iou", lambda: (boxes, boxes)),
        ("pairwise_giou", lambda: (boxes, boxes)),
        ("scatter_add", lambda: (table.copy(), idx, x)),
        ("adamw_update", lambda: (p.copy(), gr, m.copy(), v.copy(), 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8, 1e-5)),
    ]


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numpy us':>10} {'numba us':>10} {'speed-up':>9}")
    for name, build in kernel_cases(rng):
        fn_np = getattr(kernels, name + "_np")
        fn_nb = getattr(kernels, name + "_nb")
        fn_nb(*build())  # JIT
        times = []
        for fn in (fn_np, fn_nb):
            args = [build() for _ in range(repeat)]
            it = iter(args)
            times.append(min(timeit.repeat(lambda: fn(*next(it)), number=1, repeat=repeat)) * 1e6)
        print(f"{name:<20} {times[0]:>10.1f} {times[1]:>10.1f} {times[0] / times[1]:>8.2f}x")


def bench_step(steps: int) -> None:
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, SPATIALVL_NUMBA=flag, SPATIALVL_LOG_LEVEL="ERROR")
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        out[flag] = float(res.stdout.strip().splitlines()[-1])
    print(f"pre-training step: numpy {out['0'] * 1e3:.1f} ms, numba {out['1'] * 1e3:.1f} ms, "
          f"speed-up {out['0'] / out['1']:.2f}x")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--steps", type=int, default=52, help="timed steps per backend")
    p.add_argument("--skip-step", action="store_true")
    args = p.parse_args(argv)
    bench_kernels(args.repeat)
    if not args.skip_step:
        bench_step(args.steps)


if __name__ == "__main__":
    main()
