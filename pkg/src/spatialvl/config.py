"""INI run configuration: model, data, pre-training, fine-tuning and seeds.

Every key is optional; anything missing takes the built-in default::

    [model]
    hidden = 64
    [data]
    num_examples = 2000
    [train]
    steps = 6500
    tasks = MLM+MRC+SRC+OPR
    [finetune]
    steps = 600
    [seeds]
    data = 0
    train = 0
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from spatialvl.dataset import SyntheticSpec, build_vocabulary
from spatialvl.errors import ValidationError
from spatialvl.model.config import ModelConfig
from spatialvl.training.schedule import FULL_ARM


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 256
    dropout: float = 0.1
    src_metric: str = "iou_class"
    init_std: float = 0.02


@dataclass
class TrainSection:
    steps: int = 6500
    tasks: str = FULL_ARM
    lr: float = 3e-4
    batch_size: int = 16
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    literal_kl: bool = False
    src_pairs: int = 0  # 0 means one pair per object


@dataclass
class FinetuneSection:
    steps: int = 600
    lr: float = 1e-4
    batch_size: int = 16
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    train_encoder: bool = True


@dataclass
class SeedSection:
    data: int = 0
    train: int = 0
    finetune: int = 0
    analysis: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    source: str = ""

    def with_seed(self, seed: int) -> "RunConfig":
        """Every seed set to ``seed``."""
        s = SeedSection(seed, seed, seed, seed)
        return dataclasses.replace(self, seeds=s, data=dataclasses.replace(self.data, seed=seed))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in ("model", "data", "train", "finetune", "seeds"):
            cp[name] = {k: str(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        lines = []
        for sect in cp.sections():
            lines.append(f"[{sect}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sect].items())
            lines.append("")
        return "\n".join(lines)

    def content_hash(self) -> str:
        return blob_hash(self.to_ini().encode("utf-8"))


def blob_hash(data: bytes) -> str:
    """Git-style object hash: sha1 over ``b"blob <len>\\0" + data``."""
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValidationError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _section(cp, name: str, default_obj):
    if not cp.has_section(name):
        return default_obj
    known = {f.name: getattr(default_obj, f.name) for f in dataclasses.fields(default_obj)}
    values = {}
    for key, raw in cp[name].items():
        if key not in known:
            raise ValidationError(f"[{name}] unknown key {key!r}; valid: {', '.join(known)}")
        values[key] = _coerce(name, key, raw, known[key])
    return dataclasses.replace(default_obj, **values)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValidationError(f"{source}: {exc}") from None
    extra = set(cp.sections()) - {"model", "data", "train", "finetune", "seeds"}
    if extra:
        raise ValidationError(f"{source}: unknown section(s) {', '.join(sorted(extra))}")
    base = RunConfig()
    return RunConfig(
        model=_section(cp, "model", base.model),
        data=_section(cp, "data", base.data),
        train=_section(cp, "train", base.train),
        finetune=_section(cp, "finetune", base.finetune),
        seeds=_section(cp, "seeds", base.seeds),
        source=source,
    )


def load_config(path=None) -> RunConfig:
    """Defaults when ``path`` is None; OSError propagates for unreadable files."""
    if path is None:
        return RunConfig()
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def model_config(section: ModelSection, spec: SyntheticSpec) -> ModelConfig:
    """Architecture from ``section``; vocabulary, category and feature sizes from ``spec``."""
    return ModelConfig(
        vocab_size=len(build_vocabulary(spec)),
        num_categories=spec.num_categories,
        feature_dim=spec.feature_dim,
        **dataclasses.asdict(section),
    )
