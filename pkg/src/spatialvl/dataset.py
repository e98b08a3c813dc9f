"""Synthetic scenes and spatial multiple-choice questions.

Object features encode the true category plus Gaussian noise and nothing about
where the object sits, so any position knowledge a model shows has to come
from the position embedding pathway.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spatialvl.errors import ValidationError
from spatialvl.geometry import DIRECTION_NAMES, BoundingBox, direction_label, iou
from spatialvl.graph import MAX_OBJECTS, Scene, SceneObject
from spatialvl.text import Vocabulary

FORMAT_NAME = "spatialvl-dataset"
FORMAT_VERSION = 1

CATEGORY_NAMES = (
    "person", "dog", "cat", "car", "tree", "chair", "cup", "book", "lamp", "ball",
    "bike", "horse", "bottle", "table", "clock", "phone", "bag", "bird", "boat", "plant",
    "kite", "sofa", "bench", "sheep", "train", "truck", "vase", "knife", "spoon", "fork",
    "apple", "bowl", "pizza", "cake", "bed", "tv", "mouse", "remote", "oven", "sink",
)  # fmt: skip

OVERLAP_NAMES = ("no overlap", "slight overlap", "partial overlap", "heavy overlap")
OVERLAP_EDGES = (0.2, 0.5)

DIRECTION_QUESTION = "where is the {a} relative to the {b}"
OVERLAP_QUESTION = "do the {a} and the {b} overlap"
QUESTION_KINDS = ("direction", "overlap")


@dataclass(frozen=True)
class SyntheticSpec:
    image_width: float = 640.0
    image_height: float = 480.0
    min_objects: int = 4
    max_objects: int = 8
    num_categories: int = 10
    feature_dim: int = 16
    feature_noise: float = 0.3
    ground_truth_fraction: float = 0.3
    confidence_low: float = 0.2
    confidence_high: float = 1.0
    label_smoothing: float = 0.05
    min_box_frac: float = 0.1
    max_box_frac: float = 0.5
    cluster_prob: float = 0.3
    num_examples: int = 2000
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_categories < 2 or self.num_categories > len(CATEGORY_NAMES):
            raise ValidationError(f"num_categories must be in 2..{len(CATEGORY_NAMES)}")
        if self.feature_dim < 4:
            raise ValidationError("feature_dim must be >= 4")
        if not 2 <= self.min_objects <= self.max_objects <= MAX_OBJECTS:
            raise ValidationError(
                f"object range [{self.min_objects}, {self.max_objects}] must lie within [2, {MAX_OBJECTS}]"
            )
        if not (self.image_width > 0 and self.image_height > 0):
            raise ValidationError("image size must be positive")
        if self.feature_noise < 0:
            raise ValidationError("feature_noise must be >= 0")
        if not 0.0 <= self.ground_truth_fraction <= 1.0:
            raise ValidationError("ground_truth_fraction must be in [0, 1]")
        if not 0.0 <= self.confidence_low <= self.confidence_high <= 1.0:
            raise ValidationError("confidence range must satisfy 0 <= low <= high <= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must be in [0, 1)")
        if not 0.0 < self.min_box_frac <= self.max_box_frac <= 1.0:
            raise ValidationError("box size fractions must satisfy 0 < min <= max <= 1")
        if self.num_examples < 1:
            raise ValidationError(f"num_examples must be >= 1, got {self.num_examples}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must be in [0, 1)")

    @property
    def category_names(self) -> tuple[str, ...]:
        return CATEGORY_NAMES[: self.num_categories]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown SyntheticSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Example:
    scene: Scene
    question: tuple[str, ...]
    candidates: tuple[tuple[str, ...], ...]
    correct: int
    split: str = "train"
    kind: str = "direction"
    pair: tuple[int, int] = (0, 1)
    example_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "question", tuple(self.question))
        object.__setattr__(self, "candidates", tuple(tuple(c) for c in self.candidates))
        object.__setattr__(self, "pair", tuple(self.pair))
        if len(self.candidates) != 4:
            raise ValidationError(f"expected 4 candidates, got {len(self.candidates)}")
        if self.correct not in range(4):
            raise ValidationError(f"correct index {self.correct} outside 0..3")
        if self.split not in ("train", "val"):
            raise ValidationError(f"split must be 'train' or 'val', got {self.split!r}")
        if self.kind not in QUESTION_KINDS:
            raise ValidationError(f"unknown question kind {self.kind!r}")

    @property
    def answer(self) -> tuple[str, ...]:
        return self.candidates[self.correct]


def category_embeddings(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0xC47])
    return rng.standard_normal((spec.num_categories, spec.feature_dim))


def build_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    words: list[str] = []
    for template in (DIRECTION_QUESTION, OVERLAP_QUESTION):
        words += [w for w in template.split() if not w.startswith("{")]
    for phrase in DIRECTION_NAMES + OVERLAP_NAMES:
        words += phrase.split()
    words += list(spec.category_names)
    return Vocabulary(dict.fromkeys(words))


def _random_box(spec: SyntheticSpec, rng: np.random.Generator, anchor: BoundingBox | None):
    W, H = spec.image_width, spec.image_height
    if anchor is None:
        w = rng.uniform(spec.min_box_frac, spec.max_box_frac) * W
        h = rng.uniform(spec.min_box_frac, spec.max_box_frac) * H
        x1 = rng.uniform(0.0, W - w)
        y1 = rng.uniform(0.0, H - h)
    else:
        # near-duplicate of an existing box, to populate the high-IoU classes
        aw, ah = anchor.x2 - anchor.x1, anchor.y2 - anchor.y1
        w = min(W, aw * rng.uniform(0.6, 1.4))
        h = min(H, ah * rng.uniform(0.6, 1.4))
        cx, cy = anchor.center
        cx += rng.uniform(-0.5, 0.5) * aw
        cy += rng.uniform(-0.5, 0.5) * ah
        x1 = min(max(cx - w / 2, 0.0), W - w)
        y1 = min(max(cy - h / 2, 0.0), H - h)
    return BoundingBox(x1, y1, min(x1 + w, W), min(y1 + h, H))


def generate_scene(
    spec: SyntheticSpec, rng: np.random.Generator, embeddings: np.ndarray | None = None
) -> Scene:
    if embeddings is None:
        embeddings = category_embeddings(spec)
    C = spec.num_categories
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cats = rng.choice(C, size=n, replace=n > C)
    objects = []
    boxes: list[BoundingBox] = []
    for c in cats:
        anchor = None
        if boxes and rng.random() < spec.cluster_prob:
            anchor = boxes[int(rng.integers(len(boxes)))]
        box = _random_box(spec, rng, anchor)
        boxes.append(box)
        feature = embeddings[c] + spec.feature_noise * rng.standard_normal(spec.feature_dim)
        dist = np.full(C, spec.label_smoothing / C)
        dist[c] += 1.0 - spec.label_smoothing
        gt = bool(rng.random() < spec.ground_truth_fraction)
        conf = 1.0 if gt else float(rng.uniform(spec.confidence_low, spec.confidence_high))
        objects.append(SceneObject(box, feature, dist, conf, gt))
    return Scene(spec.image_width, spec.image_height, tuple(objects))


def overlap_level(a: BoundingBox, b: BoundingBox) -> int:
    v = iou(a, b)
    if v <= 0.0:
        return 0
    if v < OVERLAP_EDGES[0]:
        return 1
    if v < OVERLAP_EDGES[1]:
        return 2
    return 3


def answer_label(kind: str, a: BoundingBox, b: BoundingBox) -> int:
    if kind == "direction":
        return direction_label(a, b)
    if kind == "overlap":
        return overlap_level(a, b)
    raise ValidationError(f"unknown question kind {kind!r}")


def answer_phrases(kind: str) -> tuple[str, ...]:
    return DIRECTION_NAMES if kind == "direction" else OVERLAP_NAMES


def generate_qa(
    scene: Scene,
    rng: np.random.Generator,
    category_names=CATEGORY_NAMES,
    split: str = "train",
    example_id: int = 0,
) -> Example:
    """One question about two uniquely named objects, answer balanced by class."""
    n = len(scene.objects)
    if n < 2:
        raise ValidationError(f"questions need at least 2 objects, scene has {n}")
    cats = [o.category for o in scene.objects]
    unique = [i for i in range(n) if cats.count(cats[i]) == 1]
    pool = unique if len(unique) >= 2 else list(range(n))
    pairs = [(i, j) for i in pool for j in pool if i != j]
    kind = QUESTION_KINDS[int(rng.integers(2))]
    labels = [answer_label(kind, scene.objects[i].box, scene.objects[j].box) for i, j in pairs]
    target = int(rng.integers(4))
    matching = [p for p, lab in zip(pairs, labels) if lab == target]
    options = matching or pairs
    i, j = options[int(rng.integers(len(options)))]
    label = answer_label(kind, scene.objects[i].box, scene.objects[j].box)

    a, b = category_names[cats[i]], category_names[cats[j]]
    template = DIRECTION_QUESTION if kind == "direction" else OVERLAP_QUESTION
    question = tuple(template.format(a=a, b=b).split())
    phrases = answer_phrases(kind)
    order = rng.permutation(4)
    candidates = tuple(tuple(phrases[k].split()) for k in order)
    correct = int(np.flatnonzero(order == label)[0])
    return Example(scene, question, candidates, correct, split, kind, (i, j), example_id)


def generate_dataset(spec: SyntheticSpec) -> list[Example]:
    """Deterministic in ``spec``; each example draws from its own seed stream."""
    embeddings = category_embeddings(spec)
    n_val = int(round(spec.num_examples * spec.val_fraction))
    n_train = spec.num_examples - n_val
    streams = np.random.SeedSequence([spec.seed, 0xDA7A]).spawn(spec.num_examples)
    out = []
    for k, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        scene = generate_scene(spec, rng, embeddings)
        split = "train" if k < n_train else "val"
        out.append(generate_qa(scene, rng, spec.category_names, split, example_id=k))
    return out


def example_consistent(ex: Example) -> bool:
    """Exactly one candidate agrees with the geometry, and it is ``ex.correct``."""
    i, j = ex.pair
    label = answer_label(ex.kind, ex.scene.objects[i].box, ex.scene.objects[j].box)
    truth = tuple(answer_phrases(ex.kind)[label].split())
    hits = [k for k, c in enumerate(ex.candidates) if c == truth]
    return hits == [ex.correct]


# --------------------------------------------------------------------------
# JSON lines persistence
# --------------------------------------------------------------------------


def _example_to_record(ex: Example) -> dict:
    return {
        "id": ex.example_id,
        "split": ex.split,
        "kind": ex.kind,
        "pair": list(ex.pair),
        "question": list(ex.question),
        "candidates": [list(c) for c in ex.candidates],
        "correct": ex.correct,
        "scene": {
            "width": ex.scene.width,
            "height": ex.scene.height,
            "objects": [
                {
                    "box": list(o.box.as_tuple()),
                    "feature": o.feature.tolist(),
                    "category_distribution": o.category_distribution.tolist(),
                    "confidence": o.confidence,
                    "ground_truth": o.is_ground_truth,
                }
                for o in ex.scene.objects
            ],
        },
    }


def _record_to_example(rec: dict) -> Example:
    sc = rec["scene"]
    objects = tuple(
        SceneObject(
            BoundingBox(*o["box"]),
            np.array(o["feature"], dtype=np.float64),
            np.array(o["category_distribution"], dtype=np.float64),
            float(o["confidence"]),
            bool(o["ground_truth"]),
        )
        for o in sc["objects"]
    )
    scene = Scene(float(sc["width"]), float(sc["height"]), objects)
    return Example(
        scene,
        tuple(rec["question"]),
        tuple(tuple(c) for c in rec["candidates"]),
        int(rec["correct"]),
        rec["split"],
        rec["kind"],
        tuple(rec["pair"]),
        int(rec["id"]),
    )


@dataclass
class Dataset:
    spec: SyntheticSpec
    examples: list[Example] = field(default_factory=list)

    def split(self, name: str) -> list[Example]:
        return [e for e in self.examples if e.split == name]


def write_dataset(path, examples, spec: SyntheticSpec | None = None) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "spec": spec.to_dict() if spec else None}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in examples:
            fh.write(json.dumps(_example_to_record(ex), sort_keys=True) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValidationError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: line 1: malformed header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ValidationError(f"{path}: line 1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: line 1: unsupported version {header.get('version')!r}")
    spec = SyntheticSpec.from_dict(header["spec"]) if header.get("spec") else SyntheticSpec()
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            examples.append(_record_to_example(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: line {lineno}: malformed record: {exc}") from None
    return Dataset(spec, examples)


def feature_position_correlation(examples) -> float:
    """Mean Pearson correlation, over (feature dim, position dim) pairs, across objects."""
    feats, pos = [], []
    for ex in examples:
        feats.append(ex.scene.features)
        pos.append(ex.scene.position_array())
    F = np.concatenate(feats)
    P = np.concatenate(pos)
    Fc = (F - F.mean(0)) / F.std(0)
    Pc = (P - P.mean(0)) / P.std(0)
    corr = Fc.T @ Pc / F.shape[0]
    if not np.all(np.isfinite(corr)):
        return math.nan
    return float(corr.mean())
