"""Text checkpoint format.

Layout (UTF-8, one item per line)::

    FOGGRID-CHECKPOINT <version>
    step <int>
    layers <json list of [name, shape]>
    hyperparams <json object>
    param <name> <d0>x<d1>...
    <float.hex values separated by spaces>
    ... (one param/value pair per parameter, in ParamSet order)
    end

Values are written with ``float.hex`` so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .nn import ParamSet

FORMAT_VERSION = 1
MAGIC = "FOGGRID-CHECKPOINT"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamSet, step: int, hyperparams: dict | None = None) -> None:
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"step {int(step)}",
        "layers " + json.dumps([[k, list(v.shape)] for k, v in params.items()]),
        "hyperparams " + json.dumps(hyperparams or {}, sort_keys=True),
    ]
    for name, value in params.items():
        dims = "x".join(str(d) for d in value.shape)
        lines.append(f"param {name} {dims}")
        lines.append(" ".join(float(x).hex() for x in value.ravel()))
    lines.append("end")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path, expected_shapes: dict | None = None) -> tuple[ParamSet, int, dict]:
    """Returns (params, step, hyperparams). Raises CheckpointError on any defect."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: not UTF-8 text") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(f"{path}: missing {MAGIC} header")
    if head[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: unsupported format version {head[1]!r} (expected {FORMAT_VERSION})")
    try:
        step = int(_field(lines, 1, "step"))
        layers = json.loads(_field(lines, 2, "layers"))
        hyperparams = json.loads(_field(lines, 3, "hyperparams"))
    except (ValueError, IndexError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc

    params = []
    pos = 4
    for name, shape in layers:
        if pos + 1 >= len(lines):
            raise CheckpointError(f"{path}: truncated before parameter {name!r}")
        tag = lines[pos].split()
        if len(tag) != 3 or tag[0] != "param" or tag[1] != name:
            raise CheckpointError(f"{path}: expected parameter block {name!r}, found {lines[pos][:40]!r}")
        dims = tuple(int(d) for d in tag[2].split("x")) if tag[2] else ()
        if list(dims) != list(shape):
            raise CheckpointError(f"{path}: shape of {name!r} is {dims}, header says {tuple(shape)}")
        raw = lines[pos + 1].split()
        if len(raw) != int(np.prod(dims)):
            raise CheckpointError(f"{path}: parameter {name!r} has {len(raw)} values, expected {int(np.prod(dims))}")
        try:
            values = np.array([float.fromhex(v) for v in raw], dtype=np.float64).reshape(dims)
        except ValueError as exc:
            raise CheckpointError(f"{path}: bad value in {name!r}: {exc}") from exc
        params.append((name, values))
        pos += 2
    if pos >= len(lines) or lines[pos] != "end":
        raise CheckpointError(f"{path}: truncated (missing end marker)")
    result = ParamSet(params)
    if expected_shapes is not None and result.shapes() != dict(expected_shapes):
        raise CheckpointError(f"{path}: parameter shapes {result.shapes()} do not match {dict(expected_shapes)}")
    return result, step, hyperparams


def _field(lines: list[str], i: int, key: str) -> str:
    name, _, rest = lines[i].partition(" ")
    if name != key:
        raise ValueError(f"line {i + 1}: expected {key!r}, found {name!r}")
    return rest
