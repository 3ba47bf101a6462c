"""Single-file checkpoints with a versioned JSON header.

Layout: ``MAGIC``, a little-endian uint32 header length, the UTF-8 JSON
header, then the raw tensor bytes in header order. Nothing time- or
path-dependent is written, so save -> load -> save reproduces the bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig

MAGIC = b"RFCKPT\x00"
FORMAT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    """Checkpoint format or architecture fingerprint does not match."""


@dataclass
class CheckpointState:
    config: TrainConfig
    model: dict
    optimizer: Optional[dict] = None
    epoch: int = 0
    stage: int = 1
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.fingerprint:
            self.fingerprint = self.config.fingerprint()


def _flatten_optimizer(opt_state: dict):
    tensors = {}
    state_meta = {}
    for pid, st in sorted(opt_state["state"].items(), key=lambda kv: int(kv[0])):
        entry = {}
        for k, v in sorted(st.items()):
            if torch.is_tensor(v):
                tensors[f"optim.{pid}.{k}"] = v
                entry[k] = None
            else:
                entry[k] = v
        state_meta[str(pid)] = entry
    return tensors, {"state": state_meta, "param_groups": opt_state["param_groups"]}


def _unflatten_optimizer(meta: dict, tensors: dict) -> dict:
    state = {}
    for pid, entry in sorted(meta["state"].items(), key=lambda kv: int(kv[0])):
        st = {}
        for k, v in sorted(entry.items()):
            st[k] = tensors[f"optim.{pid}.{k}"] if v is None else v
        state[int(pid)] = st
    return {"state": state, "param_groups": meta["param_groups"]}


def _encode(ckpt: CheckpointState) -> bytes:
    tensors = {f"model.{k}": v for k, v in ckpt.model.items()}
    optim_meta = None
    if ckpt.optimizer is not None:
        opt_tensors, optim_meta = _flatten_optimizer(ckpt.optimizer)
        tensors.update(opt_tensors)
    index = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "fingerprint": ckpt.fingerprint,
        "epoch": ckpt.epoch,
        "stage": ckpt.stage,
        "config": ckpt.config.to_dict(),
        "optimizer": optim_meta,
        "meta": ckpt.meta,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)


def save_checkpoint(ckpt: CheckpointState, path) -> None:
    Path(path).write_bytes(_encode(ckpt))


def checkpoint_bytes(ckpt: CheckpointState) -> bytes:
    return _encode(ckpt)


def load_checkpoint(path, expect: Optional[TrainConfig] = None) -> CheckpointState:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointVersionError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {header['format_version']}, expected {FORMAT_VERSION}")
    cfg = TrainConfig.from_dict(header["config"])
    if cfg.fingerprint() != header["fingerprint"]:
        raise CheckpointVersionError("stored config does not match stored fingerprint")
    if expect is not None and expect.fingerprint() != header["fingerprint"]:
        raise CheckpointVersionError(
            f"architecture fingerprint {header['fingerprint']} does not match "
            f"requested config {expect.fingerprint()}")
    tensors = {}
    for rec in header["tensors"]:
        start = pos + rec["offset"]
        arr = np.frombuffer(data[start:start + rec["nbytes"]], dtype=np.dtype(rec["dtype"]))
        tensors[rec["name"]] = torch.from_numpy(arr.reshape(rec["shape"]).copy())
    model = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    optim = None
    if header["optimizer"] is not None:
        optim = _unflatten_optimizer(header["optimizer"], tensors)
    return CheckpointState(cfg, model, optim, header["epoch"], header["stage"],
                           header["fingerprint"], header["meta"])
