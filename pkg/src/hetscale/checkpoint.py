"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"HETSCKPT"
    bytes 8..11   u32    format version (currently 1)
    bytes 12..15  u32    header length H in bytes
    bytes 16..    H      UTF-8 JSON header
    then                 tensor payload: little-endian float32, concatenated

The header holds ``model_config``, ``run_config``, ``epoch``,
``growth_history``, ``branches`` (layer, selected indices, creation epoch
and scaling factor per branch, in attachment order), ``optimizer``
(step and lr) and ``tensors``: a list of ``{name, shape, offset}`` where
``offset`` counts float32 elements from the start of the payload.
Optimizer moments are stored as tensors named ``optim.m.<param>`` and
``optim.v.<param>``.

Loading is strict: an unknown version, missing or unexpected tensors,
shape mismatches and truncated or trailing payload bytes are errors.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hetscale.growth import grow
from hetscale.model import ModelConfig, VisionTransformer

MAGIC = b"HETSCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


@dataclass
class Checkpoint:
    model: VisionTransformer
    epoch: int = 0
    run_config: dict = field(default_factory=dict)
    growth_history: list = field(default_factory=list)
    optimizer: dict | None = None


def _branch_meta(model: VisionTransformer) -> list[dict]:
    meta = []
    for lay in model.linear_layers():
        for br in lay.branches:
            meta.append({"layer": lay.name, "selected": [int(i) for i in br.selected],
                         "created_at": int(br.created_at), "scaling_factor": float(br.scaling_factor)})
    return meta


def save_checkpoint(path: str | os.PathLike, model: VisionTransformer, epoch: int = 0,
                    run_config: dict | None = None, growth_history: list | None = None,
                    optimizer=None) -> Path:
    tensors: list[tuple[str, np.ndarray]] = [(n, p.data) for n, p in model.named_parameters()]
    opt_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_meta = {"step": state["step"], "lr": state["lr"]}
        tensors += [(f"optim.m.{k}", v) for k, v in state["m"].items()]
        tensors += [(f"optim.v.{k}", v) for k, v in state["v"].items()]

    table, offset = [], 0
    for name, arr in tensors:
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    header = {
        "model_config": model.cfg.to_dict(),
        "run_config": run_config or {},
        "epoch": int(epoch),
        "growth_history": growth_history or [],
        "branches": _branch_meta(model),
        "optimizer": opt_meta,
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)
    return path


def read_header(path: str | os.PathLike) -> tuple[dict, memoryview]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ValueError(f"{path}: file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise ValueError(f"{path}: truncated header")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    return header, memoryview(raw)[start + hlen:]


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    header, payload = read_header(path)
    total = sum(int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if len(payload) != 4 * total:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, table needs {4 * total}")
    data = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = data[t["offset"]:t["offset"] + n].reshape(t["shape"]).astype(np.float32)

    model = VisionTransformer(ModelConfig.from_dict(header["model_config"]), seed=0)
    for br in header["branches"]:
        grow(model.layer(br["layer"]), br["selected"], br["scaling_factor"], br["created_at"])

    params = dict(model.named_parameters())
    model_names = set(arrays) - {n for n in arrays if n.startswith("optim.")}
    missing, extra = set(params) - model_names, model_names - set(params)
    if missing or extra:
        raise ValueError(f"{path}: tensor table mismatch (missing {sorted(missing)[:3]}, "
                         f"unexpected {sorted(extra)[:3]})")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {arrays[name].shape}, model expects {p.shape}")
        p.data = arrays[name].copy()

    optimizer = None
    if header.get("optimizer"):
        optimizer = dict(header["optimizer"])
        optimizer["m"] = {n[len("optim.m."):]: a for n, a in arrays.items() if n.startswith("optim.m.")}
        optimizer["v"] = {n[len("optim.v."):]: a for n, a in arrays.items() if n.startswith("optim.v.")}
    return Checkpoint(model=model, epoch=int(header["epoch"]), run_config=header["run_config"],
                      growth_history=header["growth_history"], optimizer=optimizer)
