"""Model hyper-parameters, parameter naming and initialisation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from spatialvl.errors import ValidationError
from spatialvl.geometry import RelationMetric
from spatialvl.text import MAX_TEXT_TOKENS, MAX_VISUAL_SLOTS, NUM_TYPES


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_categories: int
    feature_dim: int
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    max_text: int = MAX_TEXT_TOKENS
    max_visual: int = MAX_VISUAL_SLOTS
    dropout: float = 0.1
    src_metric: str = RelationMetric.IOU_CLASS10.value
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "num_categories", "feature_dim", "hidden", "layers", "heads", "ffn",
                     "max_text", "max_visual"):
            if getattr(self, name) < 1:
                raise ValidationError(f"ModelConfig.{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValidationError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        RelationMetric.parse(self.src_metric)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def num_positions(self) -> int:
        # [CLS], text, [IMG], [SEP]
        return self.max_text + 3

    @property
    def metric(self) -> RelationMetric:
        return RelationMetric.parse(self.src_metric)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ValidationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    H, F = cfg.hidden, cfg.ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, H),
        "pos_emb": (cfg.num_positions, H),
        "type_emb": (NUM_TYPES, H),
        "ln_txt.g": (H,),
        "ln_txt.b": (H,),
        "vis_feat.W": (cfg.feature_dim, H),
        "vis_feat.b": (H,),
        "vis_pos.W": (5, H),
        "vis_pos.b": (H,),
        "ln_vis.g": (H,),
        "ln_vis.b": (H,),
    }
    for l in range(cfg.layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1.g": (H,), p + "ln1.b": (H,),
            p + "Wq": (H, H), p + "bq": (H,),
            p + "Wk": (H, H), p + "bk": (H,),
            p + "Wv": (H, H), p + "bv": (H,),
            p + "Wo": (H, H), p + "bo": (H,),
            p + "ln2.g": (H,), p + "ln2.b": (H,),
            p + "W1": (H, F), p + "b1": (F,),
            p + "W2": (F, H), p + "b2": (H,),
        })  # fmt: skip
    shapes.update({
        "ln_f.g": (H,), "ln_f.b": (H,),
        "mlm.b": (cfg.vocab_size,),
        "mrc.W": (H, cfg.num_categories), "mrc.b": (cfg.num_categories,),
        "mrfr.W": (H, cfg.feature_dim), "mrfr.b": (cfg.feature_dim,),
        "opr.W1": (H, H), "opr.b1": (H,), "opr.W2": (H, 5), "opr.b2": (5,),
        "src.W1": (2 * H, H), "src.b1": (H,),
        "src.W2": (H, cfg.metric.num_outputs), "src.b2": (cfg.metric.num_outputs,),
        "match.W": (H, 1), "match.b": (1,),
    })  # fmt: skip
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Gaussian(0, init_std) weights and embeddings, unit LN gains, zero biases."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = cfg.init_std * rng.standard_normal(shape)
    return params


def check_params(cfg: ModelConfig, params: dict[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    missing = set(expected) - set(params)
    if missing:
        raise ValidationError(f"missing parameters: {sorted(missing)}")
    extra = set(params) - set(expected)
    if extra:
        raise ValidationError(f"unexpected parameters: {sorted(extra)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValidationError(
                f"parameter {name!r} has shape {params[name].shape}, config expects {shape}"
            )
