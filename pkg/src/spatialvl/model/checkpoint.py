"""Checkpoint directory: ``manifest.txt`` plus ``params.bin``.

The manifest is ``key = value`` text. ``param = <name> <d0,d1,...>`` lines
give the order of arrays in the blob, which is raw little-endian float64.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from spatialvl.errors import ValidationError
from spatialvl.model.config import ModelConfig, check_params, param_shapes

FORMAT_NAME = "spatialvl-checkpoint"
FORMAT_VERSION = 1
DTYPE_TAG = "float64-le"
MANIFEST = "manifest.txt"
BLOB = "params.bin"


def save_checkpoint(path, cfg: ModelConfig, params: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    check_params(cfg, params)
    lines = [
        f"format = {FORMAT_NAME}",
        f"version = {FORMAT_VERSION}",
        f"dtype = {DTYPE_TAG}",
        f"config = {json.dumps(cfg.to_dict(), sort_keys=True)}",
    ]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta.{k} = {v}")
    for name in param_shapes(cfg):
        shape = ",".join(str(d) for d in params[name].shape)
        lines.append(f"param = {name} {shape}")
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(path / BLOB, "wb") as fh:
        for name in param_shapes(cfg):
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return path


def read_manifest(path) -> tuple[dict, list[tuple[str, tuple[int, ...]]]]:
    text = (Path(path) / MANIFEST).read_text(encoding="utf-8")
    fields: dict[str, str] = {}
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        key, sep, value = raw.partition(" = ")
        if not sep:
            raise ValidationError(f"{MANIFEST} line {lineno}: expected 'key = value'")
        if key == "param":
            name, _, shape = value.rpartition(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            entries.append((name, dims))
        else:
            fields[key] = value
    if fields.get("format") != FORMAT_NAME:
        raise ValidationError(f"{path}: not a {FORMAT_NAME} directory")
    if fields.get("dtype") != DTYPE_TAG:
        raise ValidationError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
    return fields, entries


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Returns ``(config, params, meta)``; bit-exact inverse of :func:`save_checkpoint`."""
    path = Path(path)
    fields, entries = read_manifest(path)
    cfg = ModelConfig.from_dict(json.loads(fields["config"]))
    blob = (path / BLOB).read_bytes()
    params = {}
    offset = 0
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise ValidationError(f"{path / BLOB}: truncated while reading {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ValidationError(f"{path / BLOB}: {len(blob) - offset} trailing bytes")
    check_params(cfg, params)
    if expect is not None:
        check_params(expect, params)
    meta = {k[5:]: v for k, v in fields.items() if k.startswith("meta.")}
    return cfg, params, meta
