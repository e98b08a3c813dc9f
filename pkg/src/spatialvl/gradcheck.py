"""Central finite-difference checks for every loss head and the full model.

Each check compares the analytic gradient with ``(f(x+h) - f(x-h)) / 2h`` on
sampled coordinates. The relative error is ``|a - n| / max(|a|, |n|, floor)``;
the floor keeps coordinates whose true gradient is ~0 from reporting noise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from spatialvl.dataset import SyntheticSpec, build_vocabulary, generate_dataset
from spatialvl.model import heads
from spatialvl.model.batch import collate
from spatialvl.model.config import ModelConfig, init_params
from spatialvl.model.transformer import backward, forward, zero_grads
from spatialvl.training import losses
from spatialvl.training.loop import _input, choice_scores, prepare, task_targets
from spatialvl.training.masking import make_mask_plan

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-5
COORDS = 200
WEIGHT_SCALE = 4.0

HEAD_PARAMS = {
    "MLM": ("tok_emb", "mlm.b"),
    "MRC": ("mrc.W", "mrc.b"),
    "MRC-literal": ("mrc.W", "mrc.b"),
    "MRFR": ("mrfr.W", "mrfr.b"),
    "OPR": ("opr.W1", "opr.b1", "opr.W2", "opr.b2"),
    "SRC": ("src.W1", "src.b1", "src.W2", "src.b2"),
    "MATCH": ("match.W", "match.b"),
}
ENCODER_EXCLUDE = ("mlm.", "mrc.", "mrfr.", "opr.", "src.", "match.")


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    worst: str
    coords: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(a, n, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def sample_coords(arrays: dict[str, np.ndarray], k: int, rng: np.random.Generator):
    """``k`` (name, flat index) pairs; every array gets at least one when k allows."""
    names = sorted(arrays)
    picks = [(n, int(rng.integers(arrays[n].size))) for n in names[:k]]
    sizes = np.array([arrays[n].size for n in names], dtype=np.float64)
    for i in rng.choice(len(names), size=k - len(picks), p=sizes / sizes.sum()):
        n = names[int(i)]
        picks.append((n, int(rng.integers(arrays[n].size))))
    return picks


def check_arrays(
    name: str,
    loss_fn: Callable[[], float],
    arrays: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    rng: np.random.Generator,
    coords: int = COORDS,
    step: float = STEP,
) -> CheckResult:
    """Perturb ``arrays`` in place (restored exactly) and compare with ``analytic``."""
    worst, worst_at = 0.0, ""
    for key, idx in sample_coords(arrays, coords, rng):
        flat = arrays[key].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + step
        up = loss_fn()
        flat[idx] = orig - step
        down = loss_fn()
        flat[idx] = orig
        numeric = (up - down) / (2.0 * step)
        err = float(rel_error(analytic[key].reshape(-1)[idx], numeric))
        if err > worst or not worst_at:
            worst, worst_at = err, f"{key}[{idx}]"
    return CheckResult(name, worst, worst_at, coords)


# --------------------------------------------------------------------------
# fixture: a tiny batch with fixed masks
# --------------------------------------------------------------------------


@dataclass
class Fixture:
    cfg: ModelConfig
    params: dict
    items: list
    plans: dict
    choice_items: list


def make_fixture(seed: int = 0, cfg: ModelConfig | None = None, n_examples: int = 3) -> Fixture:
    spec = SyntheticSpec(num_examples=n_examples + 1, min_objects=3, max_objects=5, seed=seed, val_fraction=0.0)
    data = generate_dataset(spec)[:n_examples]
    vocab = build_vocabulary(spec)
    if cfg is None:
        cfg = ModelConfig(vocab_size=len(vocab), num_categories=spec.num_categories, feature_dim=spec.feature_dim)
    rng = np.random.default_rng([seed, 0x6C])
    params = init_params(cfg, rng)
    # move away from the near-uniform-attention init point: larger weights and
    # non-trivial LayerNorm and bias values, so every term carries signal
    for k, v in params.items():
        if v.ndim == 2:
            v *= WEIGHT_SCALE
        elif k.endswith(".g"):
            v += rng.normal(0.0, 0.1, v.shape)
        elif k.endswith(".b") or k.startswith("layer") and k.split(".")[-1].startswith("b"):
            v += rng.normal(0.0, 0.05, v.shape)
    items = prepare(data, vocab, cfg)
    plans = {}
    for task in ("MLM", "MRC", "MRFR", "OPR", "SRC"):
        task_plans = []
        for p in items:
            plan = None
            while plan is None:
                plan = make_mask_plan(p.example, task, rng, p.seq, cfg.metric)
            task_plans.append(plan)
        plans[task] = task_plans
    choice_items = prepare(data, vocab, cfg, candidates=True)
    return Fixture(cfg, params, items, plans, choice_items)


def _head_terms(task: str, params, trace, fx: Fixture):
    """Forward one head and its loss; returns (loss, d_out, cache)."""
    if task == "MATCH":
        score, cache = heads.matching_forward(params, trace)
        correct = np.array([p.example.correct for p in fx.choice_items])
        loss, d = losses.matching_loss(score.reshape(len(fx.choice_items), 4), correct)
        return loss, d.reshape(-1), cache
    base = "MRC" if task == "MRC-literal" else task
    plans = fx.plans[base]
    b_idx, t_idx, j_idx, targets = task_targets(base, fx.items, plans, trace.batch.img_slot)
    slots = (b_idx, t_idx)
    if base == "MLM":
        out, cache = heads.mlm_forward(params, trace, slots)
        loss, d = losses.mlm_loss(out, np.array(targets, dtype=np.int64))
    elif base == "MRC":
        out, cache = heads.mrc_forward(params, trace, slots)
        loss, d = losses.mrc_loss(out, np.stack(targets), literal=task == "MRC-literal")
    elif base == "MRFR":
        out, cache = heads.mrfr_forward(params, trace, slots)
        loss, d = losses.mrfr_loss(out, np.stack(targets))
    elif base == "OPR":
        out, cache = heads.opr_forward(params, trace, slots)
        loss, d = losses.opr_loss(out, np.stack(targets))
    else:
        out, cache = heads.src_forward(params, trace, b_idx, t_idx, j_idx)
        loss, d = losses.src_loss(out, np.array(targets, dtype=np.int64))
    return loss, d, cache


_BACKWARD = {
    "MLM": heads.mlm_backward,
    "MRC": heads.mrc_backward,
    "MRC-literal": heads.mrc_backward,
    "MRFR": heads.mrfr_backward,
    "OPR": heads.opr_backward,
    "SRC": heads.src_backward,
    "MATCH": heads.matching_backward,
}


def _trace(task: str, params, fx: Fixture):
    if task == "MATCH":
        _, trace, _ = choice_scores(params, fx.cfg, fx.choice_items)
        return trace
    base = "MRC" if task == "MRC-literal" else task
    batch = collate([_input(p, plan) for p, plan in zip(fx.items, fx.plans[base])], fx.cfg.feature_dim)
    return forward(params, batch, fx.cfg)


def _corrupt(grads: dict, corrupt: tuple[str, float] | None) -> None:
    if corrupt is not None and corrupt[0] in grads:
        grads[corrupt[0]] = grads[corrupt[0]] + corrupt[1]


def check_head(task: str, fx: Fixture, rng, coords: int = COORDS, corrupt=None) -> CheckResult:
    """Gradient of one head's loss w.r.t. its parameters and its input hidden states."""
    params = fx.params
    trace = _trace(task, params, fx)
    hidden = trace.hidden.copy()
    loss, d, cache = _head_terms(task, params, trace, fx)
    d_hidden = np.zeros_like(hidden)
    g = zero_grads(params)
    _BACKWARD[task](params, cache, d, d_hidden, g)
    arrays = {k: params[k] for k in HEAD_PARAMS[task]}
    arrays["<hidden>"] = hidden
    analytic = {k: g[k] for k in HEAD_PARAMS[task]}
    analytic["<hidden>"] = d_hidden
    _corrupt(analytic, corrupt)

    def loss_fn():
        t = dataclasses.replace(trace, hidden=hidden)
        return _head_terms(task, params, t, fx)[0]

    return check_arrays(f"{task} head", loss_fn, arrays, analytic, rng, coords)


def check_model(task: str, fx: Fixture, rng, coords: int = COORDS, corrupt=None) -> CheckResult:
    """Gradient of ``task``'s loss through the whole 2-layer encoder."""
    params = fx.params
    trace = _trace(task, params, fx)
    loss, d, cache = _head_terms(task, params, trace, fx)
    d_hidden = np.zeros_like(trace.hidden)
    g = zero_grads(params)
    _BACKWARD[task](params, cache, d, d_hidden, g)
    backward(params, trace, d_hidden, g)
    _corrupt(g, corrupt)
    names = [k for k in params if not k.startswith(ENCODER_EXCLUDE)] + [
        k for k in HEAD_PARAMS[task] if k != "tok_emb"
    ]
    arrays = {k: params[k] for k in names}

    def loss_fn():
        return _head_terms(task, params, _trace(task, params, fx), fx)[0]

    return check_arrays(f"{task} full model", loss_fn, arrays, g, rng, coords)


def run_all(seed: int = 0, coords: int = COORDS, corrupt: tuple[str, float] | None = None,
            cfg: ModelConfig | None = None) -> list[CheckResult]:
    """Head checks for every loss plus full-model checks through each of them."""
    fx = make_fixture(seed, cfg)
    rng = np.random.default_rng([seed, 0x9C])
    results = []
    for task in HEAD_PARAMS:
        results.append(check_head(task, fx, rng, coords, corrupt))
    for task in HEAD_PARAMS:
        results.append(check_model(task, fx, rng, coords, corrupt))
    return results
