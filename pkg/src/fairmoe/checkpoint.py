"""Single-file binary checkpoints.

Layout::

    b"FAIRMOE\\0"  | u32 version | u64 header length | header (UTF-8 JSON)
    | float64 little-endian blocks | sha256 of everything before it (32 bytes)

The header holds the config echo, scalar state and a block index
``[{"key", "shape", "offset"}]`` (offsets in elements).  Block keys are
``params/<canonical path>``, ``adam_m/<path>``, ``adam_v/<path>`` and
``best/<path>`` (best-validation weights, when tracked).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FAIRMOE\x00"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, truncated or corrupted checkpoint."""


@dataclass
class Checkpoint:
    config: dict
    params: dict  # canonical path -> ndarray, in model order
    step: int = 0
    opt: dict = field(default_factory=dict)  # lr, beta1, beta2, eps, step
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    best_params: dict = field(default_factory=dict)  # best-validation weights, may be empty
    sampler: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    blocks = [("params/" + k, v) for k, v in ckpt.params.items()]
    blocks += [("adam_m/" + k, v) for k, v in ckpt.adam_m.items()]
    blocks += [("adam_v/" + k, v) for k, v in ckpt.adam_v.items()]
    blocks += [("best/" + k, v) for k, v in ckpt.best_params.items()]
    index, chunks, offset = [], [], 0
    for key, arr in blocks:
        arr = np.asarray(arr, dtype="<f8")  # not ascontiguousarray: it turns 0-d into 1-d
        index.append({"key": key, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = {
        "version": VERSION,
        "config": ckpt.config,
        "step": ckpt.step,
        "opt": ckpt.opt,
        "sampler": ckpt.sampler,
        "extras": ckpt.extras,
        "blocks": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen])
    data = np.frombuffer(body, dtype="<f8", offset=start + hlen)
    groups: dict[str, dict] = {"params": {}, "adam_m": {}, "adam_v": {}, "best": {}}
    for b in header["blocks"]:
        kind, name = b["key"].split("/", 1)
        n = int(np.prod(b["shape"])) if b["shape"] else 1
        groups[kind][name] = data[b["offset"] : b["offset"] + n].reshape(b["shape"]).astype(np.float64)
    return Checkpoint(
        config=header["config"],
        params=groups["params"],
        step=header["step"],
        opt=header["opt"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        best_params=groups["best"],
        sampler=header["sampler"],
        extras=header["extras"],
    )
