"""Position-embedding correlation study and text-to-object attention export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from spatialvl.dataset import CATEGORY_NAMES, Example
from spatialvl.errors import ValidationError
from spatialvl.model.batch import SequenceInput, collate
from spatialvl.model.config import ModelConfig
from spatialvl.model.transformer import forward
from spatialvl.text import Vocabulary
from spatialvl.training.masking import encode_example

NUM_SAMPLES = 100
CSV_FIELDS = (
    "run_id",
    "task_set",
    "n_samples",
    "input_corr",
    "output_corr",
    "input_corr_dim",
    "output_corr_dim",
    "n_objects",
    "n_skipped",
    "delta_input_corr",
    "delta_output_corr",
)


def pearson(a, b) -> float | None:
    """Pearson correlation of two vectors; None when either has zero variance."""
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return None
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def _per_dimension(x: np.ndarray, y: np.ndarray) -> float:
    """Mean over dimensions of the correlation across rows; zero-variance dims skipped."""
    vals = [pearson(x[:, d], y[:, d]) for d in range(x.shape[1])]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def sample_examples(examples: Sequence[Example], n: int = NUM_SAMPLES, seed: int = 0) -> list[Example]:
    """``n`` examples without replacement, in dataset order, reproducible from ``seed``."""
    if len(examples) < 2:
        raise ValidationError("analysis needs at least 2 examples")
    rng = np.random.default_rng([seed, 0xA7])
    idx = np.sort(rng.choice(len(examples), size=min(n, len(examples)), replace=False))
    return [examples[int(i)] for i in idx]


def _trace(params, cfg: ModelConfig, vocab: Vocabulary, examples: Sequence[Example]):
    inputs = []
    for ex in examples:
        seq = encode_example(ex, vocab, max_text=cfg.max_text, max_visual=cfg.max_visual)
        inputs.append(SequenceInput(seq, ex.scene.position_array(), ex.scene.features))
    return forward(params, collate(inputs, cfg.feature_dim), cfg)


@dataclass
class CorrelationReport:
    """Mean Pearson correlation (across hidden dimensions) of each object's
    projected position embedding with its input visual embedding and with F_[CLS].

    ``*_dim`` are the per-dimension alternative: correlation across objects
    for each hidden dimension, averaged over dimensions.
    """

    n_samples: int
    n_objects: int
    n_skipped: int
    input_corr: float
    output_corr: float
    input_corr_dim: float
    output_corr_dim: float

    def row(self, run_id: str = "", task_set: str = "") -> dict:
        return {
            "run_id": run_id,
            "task_set": task_set,
            "n_samples": self.n_samples,
            "input_corr": self.input_corr,
            "output_corr": self.output_corr,
            "input_corr_dim": self.input_corr_dim,
            "output_corr_dim": self.output_corr_dim,
            "n_objects": self.n_objects,
            "n_skipped": self.n_skipped,
        }


def correlation_report(params, cfg: ModelConfig, vocab: Vocabulary, examples: Sequence[Example],
                       batch_size: int = 50) -> CorrelationReport:
    """Dropout is off; each text is the question plus its correct answer."""
    if len(examples) < 2:
        raise ValidationError("correlation analysis needs at least 2 examples")
    pos_rows, vis_rows, cls_rows = [], [], []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        trace = _trace(params, cfg, vocab, chunk)
        for b, ex in enumerate(chunk):
            img = int(trace.batch.img_slot[b])
            k = len(ex.scene.objects)
            slots = slice(img + 1, img + 1 + k)
            pos_rows.append(trace.position_embeddings[b, slots])
            vis_rows.append(trace.input_embeddings[b, slots])
            cls_rows.append(np.repeat(trace.hidden[b, :1], k, axis=0))
    pos = np.concatenate(pos_rows)
    vis = np.concatenate(vis_rows)
    cls = np.concatenate(cls_rows)
    ins, outs = [], []
    skipped = 0
    for p, v, c in zip(pos, vis, cls):
        ci, co = pearson(p, v), pearson(p, c)
        if ci is None or co is None:
            skipped += 1
            continue
        ins.append(ci)
        outs.append(co)
    if not ins:
        raise ValidationError(f"all {len(pos)} objects had zero-variance vectors")
    return CorrelationReport(
        n_samples=len(examples),
        n_objects=len(pos),
        n_skipped=skipped,
        input_corr=float(np.mean(ins)),
        output_corr=float(np.mean(outs)),
        input_corr_dim=_per_dimension(pos, vis),
        output_corr_dim=_per_dimension(pos, cls),
    )


@dataclass
class AttentionReport:
    """Attention from text slots (rows) to visual slots (columns) for one example."""

    example_id: int
    tokens: list[str]
    objects: list[str]
    layer: int
    head: int | str
    matrix: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "tokens": self.tokens,
            "objects": self.objects,
            "layer": self.layer,
            "head": self.head,
            "matrix": self.matrix.tolist(),
        }


def attention_report(params, cfg: ModelConfig, vocab: Vocabulary, example: Example,
                     layers: Sequence[int] | None = None, per_head: bool = True) -> list[AttentionReport]:
    """One report per selected layer and head, plus the head average (``head="mean"``).

    The default selection is the final layer.
    """
    layers = [cfg.layers - 1] if layers is None else list(layers)
    for l in layers:
        if not 0 <= l < cfg.layers:
            raise ValidationError(f"layer {l} out of range 0..{cfg.layers - 1}")
    trace = _trace(params, cfg, vocab, [example])
    seq = encode_example(example, vocab, max_text=cfg.max_text, max_visual=cfg.max_visual)
    text = seq.text_slots
    vis = seq.visual_slots
    tokens = [vocab.word(int(seq.token_ids[s])) for s in text]
    objects = [f"{k}:{CATEGORY_NAMES[o.category]}" for k, o in enumerate(example.scene.objects)]
    out = []
    for l in layers:
        att = trace.attentions[l][0][:, text][:, :, vis]
        if per_head:
            for h in range(att.shape[0]):
                out.append(AttentionReport(example.example_id, tokens, objects, l, h, att[h]))
        out.append(AttentionReport(example.example_id, tokens, objects, l, "mean", att.mean(axis=0)))
    return out


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def _fmt(v):
    if v is None or v == "":
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def correlation_rows(reports: Sequence[tuple[str, str, CorrelationReport]]) -> list[dict]:
    """CSV rows for ``(run_id, task_set, report)``; with two reports the second
    row carries ``delta_* = second - first``."""
    rows = [rep.row(run_id, task_set) for run_id, task_set, rep in reports]
    for r in rows:
        r["delta_input_corr"] = r["delta_output_corr"] = ""
    if len(rows) == 2:
        rows[1]["delta_input_corr"] = rows[1]["input_corr"] - rows[0]["input_corr"]
        rows[1]["delta_output_corr"] = rows[1]["output_corr"] - rows[0]["output_corr"]
    return rows


def write_correlation_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in CSV_FIELDS})
    return path


def read_correlation_csv(path) -> list[dict]:
    ints = ("n_samples", "n_objects", "n_skipped")
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for k, v in r.items():
                if k in ("run_id", "task_set"):
                    row[k] = v
                elif v == "":
                    row[k] = None
                else:
                    row[k] = int(v) if k in ints else float(v)
            out.append(row)
    return out


def write_attention_json(path, reports: Sequence[AttentionReport]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1)
        fh.write("\n")
    return path


def emit_reports(out_dir, correlations: Sequence[tuple[str, str, CorrelationReport]],
                 attentions: Sequence[AttentionReport]) -> tuple[Path, Path]:
    """Writes ``correlation.csv`` and ``attention.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_correlation_csv(out_dir / "correlation.csv", correlation_rows(correlations))
    json_path = write_attention_json(out_dir / "attention.json", attentions)
    return csv_path, json_path
