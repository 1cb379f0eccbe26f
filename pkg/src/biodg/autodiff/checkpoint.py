"""Checkpoint I/O: ``<name>.ckpt.json`` descriptor + ``<name>.ckpt.bin`` float32 LE block."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError


def save_checkpoint(prefix, descriptor: dict, params) -> tuple[Path, Path]:
    """Write ``params`` (ordered (name, Tensor) pairs) after the descriptor.

    The descriptor gets a ``parameters`` list of {name, shape, offset} entries
    so the binary block can be sliced without rebuilding the network.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries, blocks, offset = [], [], 0
    for name, p in params:
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blocks.append(arr.ravel())
    desc = dict(descriptor)
    desc["parameters"] = entries
    desc["n_values"] = offset
    json_path = prefix.with_name(prefix.name + ".ckpt.json")
    bin_path = prefix.with_name(prefix.name + ".ckpt.bin")
    json_path.write_text(json.dumps(desc, indent=2, sort_keys=True))
    flat = np.concatenate(blocks) if blocks else np.zeros(0, dtype="<f4")
    bin_path.write_bytes(flat.astype("<f4").tobytes())
    return json_path, bin_path


def load_checkpoint(prefix) -> tuple[dict, dict[str, np.ndarray]]:
    prefix = Path(prefix)
    json_path = prefix.with_name(prefix.name + ".ckpt.json")
    bin_path = prefix.with_name(prefix.name + ".ckpt.bin")
    desc = json.loads(json_path.read_text())
    flat = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    if flat.size != desc["n_values"]:
        raise ConfigError(f"{bin_path}: expected {desc['n_values']} values, found {flat.size}")
    values = {}
    for e in desc["parameters"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        values[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return desc, values


def assign_params(params, values: dict[str, np.ndarray]):
    for name, p in params:
        if name not in values:
            raise ConfigError(f"checkpoint lacks parameter {name}")
        v = values[name]
        if tuple(v.shape) != tuple(p.shape):
            raise ConfigError(f"parameter {name}: checkpoint shape {v.shape} != model shape {p.shape}")
        p.data = v.astype(p.dtype)
