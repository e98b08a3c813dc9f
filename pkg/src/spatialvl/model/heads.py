"""Prediction heads over the final hidden states.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
adds parameter gradients into ``grads`` and the hidden-state gradient into
``d_hidden``. Slots are given as a pair of index arrays ``(b_idx, t_idx)``.
"""

from __future__ import annotations

import numpy as np

from spatialvl import kernels
from spatialvl.errors import ValidationError
from spatialvl.model.transformer import ForwardTrace


def as_slots(slots) -> tuple[np.ndarray, np.ndarray]:
    b_idx, t_idx = slots
    return np.asarray(b_idx, dtype=np.int64), np.asarray(t_idx, dtype=np.int64)


def _require_modality(trace: ForwardTrace, slots, visual: bool, head: str) -> None:
    b_idx, t_idx = slots
    flags = trace.batch.is_visual[b_idx, t_idx]
    if visual and not np.all(flags):
        raise ValidationError(f"{head} head needs visual slots")
    if not visual:
        if np.any(flags) or np.any(t_idx < 1) or np.any(t_idx >= trace.batch.img_slot[b_idx]):
            raise ValidationError(f"{head} head needs text token slots")


def _scatter(d_hidden, slots, d_rows):
    np.add.at(d_hidden, slots, d_rows)


# --------------------------------------------------------------------------
# single linear projections: MLM (tied to tok_emb), MRC, MRFR
# --------------------------------------------------------------------------


def mlm_forward(params, trace, slots):
    slots = as_slots(slots)
    _require_modality(trace, slots, visual=False, head="MLM")
    x = trace.hidden[slots]
    return x @ params["tok_emb"].T + params["mlm.b"], (slots, x)


def mlm_backward(params, cache, d_out, d_hidden, grads):
    slots, x = cache
    grads["tok_emb"] += d_out.T @ x
    grads["mlm.b"] += d_out.sum(0)
    _scatter(d_hidden, slots, d_out @ params["tok_emb"])


def _linear_forward(name, params, trace, slots, head):
    slots = as_slots(slots)
    _require_modality(trace, slots, visual=True, head=head)
    x = trace.hidden[slots]
    return x @ params[name + ".W"] + params[name + ".b"], (slots, x)


def _linear_backward(name, params, cache, d_out, d_hidden, grads):
    slots, x = cache
    grads[name + ".W"] += x.T @ d_out
    grads[name + ".b"] += d_out.sum(0)
    _scatter(d_hidden, slots, d_out @ params[name + ".W"].T)


def mrc_forward(params, trace, slots):
    return _linear_forward("mrc", params, trace, slots, "MRC")


def mrc_backward(params, cache, d_out, d_hidden, grads):
    _linear_backward("mrc", params, cache, d_out, d_hidden, grads)


def mrfr_forward(params, trace, slots):
    return _linear_forward("mrfr", params, trace, slots, "MRFR")


def mrfr_backward(params, cache, d_out, d_hidden, grads):
    _linear_backward("mrfr", params, cache, d_out, d_hidden, grads)


# --------------------------------------------------------------------------
# two-layer MLPs: OPR on one visual slot, SRC on a concatenated pair
# --------------------------------------------------------------------------


def _mlp_forward(name, params, x):
    u = x @ params[name + ".W1"] + params[name + ".b1"]
    h = kernels.gelu_forward(np.ascontiguousarray(u))
    return h @ params[name + ".W2"] + params[name + ".b2"], (x, u, h)


def _mlp_backward(name, params, cache, d_out, grads):
    x, u, h = cache
    grads[name + ".W2"] += h.T @ d_out
    grads[name + ".b2"] += d_out.sum(0)
    du = kernels.gelu_backward(u, np.ascontiguousarray(d_out @ params[name + ".W2"].T))
    grads[name + ".W1"] += x.T @ du
    grads[name + ".b1"] += du.sum(0)
    return du @ params[name + ".W1"].T


def opr_forward(params, trace, slots):
    """Predicted position 5-vector; unconstrained linear output."""
    slots = as_slots(slots)
    _require_modality(trace, slots, visual=True, head="OPR")
    out, mlp_cache = _mlp_forward("opr", params, trace.hidden[slots])
    return out, (slots, mlp_cache)


def opr_backward(params, cache, d_out, d_hidden, grads):
    slots, mlp_cache = cache
    _scatter(d_hidden, slots, _mlp_backward("opr", params, mlp_cache, d_out, grads))


def src_forward(params, trace, b_idx, i_slots, j_slots):
    """Relation logits for ordered slot pairs, fused by concatenation [F_i; F_j]."""
    b_idx = np.asarray(b_idx, dtype=np.int64)
    si = (b_idx, np.asarray(i_slots, dtype=np.int64))
    sj = (b_idx, np.asarray(j_slots, dtype=np.int64))
    if np.any(si[1] == sj[1]):
        raise ValidationError("SRC head needs two distinct slots")
    _require_modality(trace, si, visual=True, head="SRC")
    _require_modality(trace, sj, visual=True, head="SRC")
    x = np.concatenate([trace.hidden[si], trace.hidden[sj]], axis=1)
    out, mlp_cache = _mlp_forward("src", params, x)
    return out, (si, sj, mlp_cache)


def src_backward(params, cache, d_out, d_hidden, grads):
    si, sj, mlp_cache = cache
    dx = _mlp_backward("src", params, mlp_cache, d_out, grads)
    H = dx.shape[1] // 2
    _scatter(d_hidden, si, dx[:, :H])
    _scatter(d_hidden, sj, dx[:, H:])


# --------------------------------------------------------------------------
# matching: elementwise F_[CLS] * F_[IMG], then one linear unit
# --------------------------------------------------------------------------


def matching_forward(params, trace):
    B = trace.hidden.shape[0]
    rows = np.arange(B)
    img = trace.batch.img_slot
    f_cls = trace.hidden[rows, 0]
    f_img = trace.hidden[rows, img]
    z = f_cls * f_img
    score = (z @ params["match.W"])[:, 0] + params["match.b"][0]
    return score, (rows, img, f_cls, f_img, z)


def matching_backward(params, cache, d_score, d_hidden, grads):
    rows, img, f_cls, f_img, z = cache
    d_score = np.asarray(d_score, dtype=np.float64).reshape(-1, 1)
    grads["match.W"] += z.T @ d_score
    grads["match.b"] += d_score.sum(0)
    dz = d_score @ params["match.W"].T
    np.add.at(d_hidden, (rows, np.zeros_like(rows)), dz * f_img)
    np.add.at(d_hidden, (rows, img), dz * f_cls)
