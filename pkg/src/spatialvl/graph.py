"""Scenes and their spatial relation graphs.

A graph is complete over the scene's objects: nodes are position vectors and
every unordered pair carries a relation label for the chosen metric.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from spatialvl.errors import ValidationError
from spatialvl.geometry import (
    BoundingBox,
    PositionVector,
    RelationLabel,
    RelationMetric,
    boxes_to_array,
    discretize_iou,
    giou_to_unit,
    pairwise_giou,
    pairwise_iou,
    position_vector,
    relation_edge,
)

MAX_OBJECTS = 100
OPR_CONFIDENCE_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class SceneObject:
    box: BoundingBox
    feature: np.ndarray
    category_distribution: np.ndarray
    confidence: float
    is_ground_truth: bool = False

    def __post_init__(self):
        dist = np.asarray(self.category_distribution, dtype=np.float64)
        if dist.ndim != 1 or dist.size < 2:
            raise ValidationError("category_distribution must be a 1-D vector over >= 2 categories")
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
            raise ValidationError(f"category_distribution is not a distribution (sum={dist.sum()!r})")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "category_distribution", dist)
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=np.float64))

    @property
    def category(self) -> int:
        return int(np.argmax(self.category_distribution))

    def __eq__(self, other):
        if not isinstance(other, SceneObject):
            return NotImplemented
        return (
            self.box == other.box
            and np.array_equal(self.feature, other.feature)
            and np.array_equal(self.category_distribution, other.category_distribution)
            and self.confidence == other.confidence
            and self.is_ground_truth == other.is_ground_truth
        )


@dataclass(frozen=True)
class Scene:
    width: float
    height: float
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"scene size must be positive, got {self.width}x{self.height}")
        n = len(self.objects)
        if not 1 <= n <= MAX_OBJECTS:
            raise ValidationError(f"scene must hold 1..{MAX_OBJECTS} objects, got {n}")
        for i, obj in enumerate(self.objects):
            b = obj.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValidationError(f"object {i} box {b.as_tuple()} leaves the image")
        dims = {obj.feature.shape for obj in self.objects}
        if len(dims) != 1:
            raise ValidationError(f"objects disagree on feature shape: {sorted(dims)}")

    @property
    def boxes(self) -> np.ndarray:
        return boxes_to_array([o.box for o in self.objects])

    @property
    def features(self) -> np.ndarray:
        return np.stack([o.feature for o in self.objects])

    def position_array(self) -> np.ndarray:
        return np.stack(
            [position_vector(o.box, self.width, self.height).as_array() for o in self.objects]
        )

    def check_feature_dim(self, d_v: int) -> None:
        got = self.objects[0].feature.shape
        if got != (d_v,):
            raise ValidationError(f"feature shape {got} does not match configured d_v={d_v}")


@dataclass(frozen=True)
class SpatialRelationGraph:
    nodes: tuple[PositionVector, ...]
    edges: dict[tuple[int, int], RelationLabel]
    metric: RelationMetric
    boxes: tuple[BoundingBox, ...] = field(repr=False, default=())

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def label(self, i: int, j: int) -> RelationLabel:
        """Label of the ordered pair (i, j).

        Stored edges use i < j. For asymmetric metrics the reverse order is
        recomputed from the boxes.
        """
        if i == j:
            raise ValidationError("relation label needs two distinct nodes")
        if i < j:
            return self.edges[(i, j)]
        if self.metric.is_symmetric:
            return self.edges[(j, i)]
        return relation_edge(self.metric, self.boxes[i], self.boxes[j])


def build_graph(scene: Scene, metric) -> SpatialRelationGraph:
    if not isinstance(scene, Scene):
        raise ValidationError(f"expected Scene, got {type(scene).__name__}")
    metric = RelationMetric.parse(metric)
    boxes = tuple(o.box for o in scene.objects)
    nodes = tuple(position_vector(b, scene.width, scene.height) for b in boxes)
    n = len(boxes)
    edges: dict[tuple[int, int], RelationLabel] = {}
    if metric in (RelationMetric.IOU_VALUE, RelationMetric.IOU_CLASS10, RelationMetric.GIOU_CLASS10):
        arr = boxes_to_array(boxes)
        if metric is RelationMetric.GIOU_CLASS10:
            mat = pairwise_giou(arr)
        else:
            mat = pairwise_iou(arr)
        for i, j in itertools.combinations(range(n), 2):
            v = float(mat[i, j])
            if metric is RelationMetric.IOU_VALUE:
                edges[(i, j)] = RelationLabel(metric, v)
            elif metric is RelationMetric.IOU_CLASS10:
                edges[(i, j)] = RelationLabel(metric, discretize_iou(v))
            else:
                edges[(i, j)] = RelationLabel(metric, discretize_iou(giou_to_unit(v)))
    else:
        for i, j in itertools.combinations(range(n), 2):
            edges[(i, j)] = relation_edge(metric, boxes[i], boxes[j])
    return SpatialRelationGraph(nodes=nodes, edges=edges, metric=metric, boxes=boxes)


def eligible_opr_nodes(scene: Scene) -> frozenset[int]:
    """Objects whose position may be masked: confident detections or ground truth."""
    return frozenset(
        i
        for i, o in enumerate(scene.objects)
        if o.confidence > OPR_CONFIDENCE_THRESHOLD or o.is_ground_truth
    )


def sample_src_pairs(
    graph: SpatialRelationGraph, k: int, rng: np.random.Generator
) -> list[tuple[int, int, RelationLabel]]:
    """Draw up to ``k`` distinct ordered pairs uniformly without replacement."""
    n = graph.num_nodes
    if n < 2:
        raise ValidationError(f"SRC needs at least 2 objects, graph has {n}")
    if k < 1:
        raise ValidationError(f"pair count must be >= 1, got {k}")
    ordered = [(i, j) for i in range(n) for j in range(n) if i != j]
    take = min(k, len(ordered))
    picks = rng.choice(len(ordered), size=take, replace=False)
    return [(ordered[p][0], ordered[p][1], graph.label(*ordered[p])) for p in picks]


# --------------------------------------------------------------------------
# text form: one edge per line, "i j metric label"
# --------------------------------------------------------------------------


def format_edges(graph: SpatialRelationGraph) -> str:
    lines = []
    for (i, j), lab in sorted(graph.edges.items()):
        value = repr(float(lab.value)) if graph.metric.is_regression else str(int(lab.value))
        lines.append(f"{i} {j} {graph.metric.value} {value}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_edges(lines: Iterable[str]) -> dict[tuple[int, int], RelationLabel]:
    edges = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValidationError(f"line {lineno}: expected 'i j metric label', got {line!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
            metric = RelationMetric.parse(parts[2])
            value = float(parts[3]) if metric.is_regression else int(parts[3])
            if metric.is_regression and not math.isfinite(value):
                raise ValidationError("non-finite IoU value")
            edges[(i, j)] = RelationLabel(metric, value)
        except (ValueError, ValidationError) as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
    return edges
