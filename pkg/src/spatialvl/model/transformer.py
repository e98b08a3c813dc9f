"""Single-stream pre-norm transformer over [CLS] text [IMG] visual [SEP].

Forward caches every intermediate needed by :func:`backward`, which returns
gradients for every named parameter given the gradient of the final hidden
states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from spatialvl import kernels
from spatialvl.errors import NumericError, ValidationError
from spatialvl.model.batch import Batch
from spatialvl.model.config import ModelConfig

MASK_BIAS = -1e9


def _ln_forward(x, g, b, eps):
    shape = x.shape
    y, xhat, rstd = kernels.layernorm_forward(np.ascontiguousarray(x).reshape(-1, shape[-1]), g, b, eps)
    return y.reshape(shape), (xhat, rstd)


def _ln_backward(dy, cache, g):
    xhat, rstd = cache
    dx, dg, db = kernels.layernorm_backward(
        np.ascontiguousarray(dy).reshape(-1, dy.shape[-1]), xhat, rstd, g
    )
    return dx.reshape(dy.shape), dg, db


def _dropout(x, p, rng):
    if rng is None or p <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def _split_heads(x2d, B, T, A, dh):
    return x2d.reshape(B, T, A, dh).transpose(0, 2, 1, 3)


def _merge_heads(x4d):
    B, A, T, dh = x4d.shape
    return x4d.transpose(0, 2, 1, 3).reshape(B * T, A * dh)


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activations in {where}")


@dataclass(eq=False)
class ForwardTrace:
    hidden: np.ndarray
    attentions: list[np.ndarray]
    input_embeddings: np.ndarray
    position_embeddings: np.ndarray
    batch: Batch
    cache: dict = field(repr=False, default_factory=dict)

    def state(self, b: int, slot: int) -> np.ndarray:
        return self.hidden[b, slot]


def embed(params, batch: Batch, cfg: ModelConfig):
    """Input embeddings for every slot, before dropout.

    Text slots: token + sequence position + type, then LN_txt. Visual slots:
    projected feature + projected position vector (dropped where
    ``pos_keep`` is false) + visual type, then LN_vis.
    """
    tok, pos, typ = batch.token_ids, batch.positions, batch.type_ids
    if tok.min() < 0 or tok.max() >= cfg.vocab_size:
        raise ValidationError(f"token id out of range [0, {cfg.vocab_size})")
    if pos.max() >= cfg.num_positions:
        raise ValidationError(f"sequence position {pos.max()} exceeds table size {cfg.num_positions}")
    if batch.features.shape[-1] != cfg.feature_dim:
        raise ValidationError(
            f"feature dim {batch.features.shape[-1]} does not match config feature_dim={cfg.feature_dim}"
        )
    P = params
    type_rows = P["type_emb"][typ]
    text_e = P["tok_emb"][tok] + P["pos_emb"][pos] + type_rows
    pos_proj = batch.boxes5 @ P["vis_pos.W"] + P["vis_pos.b"]
    vis_e = batch.features @ P["vis_feat.W"] + P["vis_feat.b"]
    vis_e = vis_e + np.where(batch.pos_keep[..., None], pos_proj, 0.0) + type_rows
    xt, ct = _ln_forward(text_e, P["ln_txt.g"], P["ln_txt.b"], cfg.ln_eps)
    xv, cv = _ln_forward(vis_e, P["ln_vis.g"], P["ln_vis.b"], cfg.ln_eps)
    x0 = np.where(batch.is_visual[..., None], xv, xt)
    return x0, pos_proj, (ct, cv)


def forward(params, batch: Batch, cfg: ModelConfig, dropout_rng: np.random.Generator | None = None) -> ForwardTrace:
    B, T = batch.token_ids.shape
    H, A, dh = cfg.hidden, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    P = params
    p_drop = cfg.dropout

    x0, pos_proj, emb_cache = embed(params, batch, cfg)
    _check_finite(x0, "embeddings")
    x, m0 = _dropout(x0, p_drop, dropout_rng)
    bias = np.where(batch.key_valid, 0.0, MASK_BIAS)[:, None, None, :]

    layer_caches = []
    attentions = []
    for l in range(cfg.layers):
        pre = f"layer{l}."
        h, c1 = _ln_forward(x, P[pre + "ln1.g"], P[pre + "ln1.b"], cfg.ln_eps)
        h2d = h.reshape(B * T, H)
        q = _split_heads(h2d @ P[pre + "Wq"] + P[pre + "bq"], B, T, A, dh)
        k = _split_heads(h2d @ P[pre + "Wk"] + P[pre + "bk"], B, T, A, dh)
        v = _split_heads(h2d @ P[pre + "Wv"] + P[pre + "bv"], B, T, A, dh)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + bias
        att = kernels.softmax_forward(np.ascontiguousarray(scores).reshape(-1, T)).reshape(B, A, T, T)
        ctx = _merge_heads(att @ v)
        o = ctx @ P[pre + "Wo"] + P[pre + "bo"]
        o, m1 = _dropout(o, p_drop, dropout_rng)
        x = x + o.reshape(B, T, H)

        h2, c2 = _ln_forward(x, P[pre + "ln2.g"], P[pre + "ln2.b"], cfg.ln_eps)
        h2f = h2.reshape(B * T, H)
        u = h2f @ P[pre + "W1"] + P[pre + "b1"]
        gact = kernels.gelu_forward(np.ascontiguousarray(u))
        f = gact @ P[pre + "W2"] + P[pre + "b2"]
        f, m2 = _dropout(f, p_drop, dropout_rng)
        x = x + f.reshape(B, T, H)
        _check_finite(x, f"layer {l}")

        attentions.append(att)
        layer_caches.append((c1, h2d, q, k, v, att, ctx, m1, c2, h2f, u, gact, m2))

    hidden, cf = _ln_forward(x, P["ln_f.g"], P["ln_f.b"], cfg.ln_eps)
    cache = {"emb": emb_cache, "m0": m0, "layers": layer_caches, "final": cf, "cfg": cfg}
    return ForwardTrace(hidden, attentions, x0, pos_proj, batch, cache)


def zero_grads(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def backward(params, trace: ForwardTrace, d_hidden: np.ndarray, grads: dict | None = None) -> dict:
    """Accumulate parameter gradients for ``d_hidden`` into ``grads`` (new dict if None)."""
    if d_hidden.shape != trace.hidden.shape:
        raise ValidationError(f"gradient shape {d_hidden.shape} does not match hidden {trace.hidden.shape}")
    cfg: ModelConfig = trace.cache["cfg"]
    batch = trace.batch
    B, T = batch.token_ids.shape
    H, A, dh = cfg.hidden, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    P = params
    g = zero_grads(params) if grads is None else grads

    dx, dg, db = _ln_backward(d_hidden, trace.cache["final"], P["ln_f.g"])
    g["ln_f.g"] += dg
    g["ln_f.b"] += db

    for l in reversed(range(cfg.layers)):
        pre = f"layer{l}."
        c1, h2d, q, k, v, att, ctx, m1, c2, h2f, u, gact, m2 = trace.cache["layers"][l]

        df = dx.reshape(B * T, H)
        if m2 is not None:
            df = df * m2
        g[pre + "W2"] += gact.T @ df
        g[pre + "b2"] += df.sum(0)
        du = kernels.gelu_backward(u, np.ascontiguousarray(df @ P[pre + "W2"].T))
        g[pre + "W1"] += h2f.T @ du
        g[pre + "b1"] += du.sum(0)
        dres, dg, db = _ln_backward((du @ P[pre + "W1"].T).reshape(B, T, H), c2, P[pre + "ln2.g"])
        g[pre + "ln2.g"] += dg
        g[pre + "ln2.b"] += db
        dx = dx + dres

        do = dx.reshape(B * T, H)
        if m1 is not None:
            do = do * m1
        g[pre + "Wo"] += ctx.T @ do
        g[pre + "bo"] += do.sum(0)
        dctx = _split_heads(do @ P[pre + "Wo"].T, B, T, A, dh)
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        ds = kernels.softmax_backward(
            np.ascontiguousarray(att).reshape(-1, T), np.ascontiguousarray(datt).reshape(-1, T)
        ).reshape(B, A, T, T) * scale
        dq = _merge_heads(ds @ k)
        dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
        dv = _merge_heads(dv)
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            g[pre + "W" + name] += h2d.T @ d
            g[pre + "b" + name] += d.sum(0)
        dh_ = dq @ P[pre + "Wq"].T + dk @ P[pre + "Wk"].T + dv @ P[pre + "Wv"].T
        dres, dg, db = _ln_backward(dh_.reshape(B, T, H), c1, P[pre + "ln1.g"])
        g[pre + "ln1.g"] += dg
        g[pre + "ln1.b"] += db
        dx = dx + dres

    if trace.cache["m0"] is not None:
        dx = dx * trace.cache["m0"]
    vis = batch.is_visual[..., None]
    ct, cv = trace.cache["emb"]
    d_text, dg, db = _ln_backward(np.where(vis, 0.0, dx), ct, P["ln_txt.g"])
    g["ln_txt.g"] += dg
    g["ln_txt.b"] += db
    d_vis, dg, db = _ln_backward(np.where(vis, dx, 0.0), cv, P["ln_vis.g"])
    g["ln_vis.g"] += dg
    g["ln_vis.b"] += db

    d_text2 = d_text.reshape(-1, H)
    d_vis2 = d_vis.reshape(-1, H)
    d_text2 = np.ascontiguousarray(d_text2)
    kernels.scatter_add(g["tok_emb"], np.ascontiguousarray(batch.token_ids.ravel()), d_text2)
    kernels.scatter_add(g["pos_emb"], np.ascontiguousarray(batch.positions.ravel()), d_text2)
    kernels.scatter_add(g["type_emb"], np.ascontiguousarray(batch.type_ids.ravel()), d_text2 + d_vis2)
    g["vis_feat.W"] += batch.features.reshape(-1, cfg.feature_dim).T @ d_vis2
    g["vis_feat.b"] += d_vis2.sum(0)
    d_pos = np.where(batch.pos_keep.reshape(-1, 1), d_vis2, 0.0)
    g["vis_pos.W"] += batch.boxes5.reshape(-1, 5).T @ d_pos
    g["vis_pos.b"] += d_pos.sum(0)
    return g
