"""Checkpoint persistence: a JSON index next to a raw float32 blob.

``index.json`` carries the format version, the config echo, the seed, the
epoch count, and per-tensor byte offsets into ``params.bin``, which holds
every state-dict tensor as little-endian float32 in sorted name order. The
layout is language neutral and diffable, and a save/load/save cycle is
byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidRecord, MissingInput, VersionMismatch
from .fsio import atomic_write_bytes, atomic_write_text

CHECKPOINT_FORMAT_VERSION = 1

INDEX_NAME = "index.json"
PARAMS_NAME = "params.bin"


@dataclass
class Checkpoint:
    config: dict
    seed: int
    epoch: int
    state: dict = field(default_factory=dict)  # name -> float32 tensor

    def load_into(self, model: torch.nn.Module):
        model.load_state_dict({k: v.clone() for k, v in self.state.items()})
        return model


def save_checkpoint(directory: str, model: torch.nn.Module, config_echo: dict,
                    seed: int, epoch: int):
    os.makedirs(directory, exist_ok=True)
    state = model.state_dict()
    tensors = {}
    blobs = []
    offset = 0
    for name in sorted(state.keys()):
        t = state[name].detach().cpu()
        if not torch.is_floating_point(t):
            raise InvalidRecord(f"tensor {name} is not floating point")
        arr = t.to(torch.float32).numpy().astype("<f4")
        tensors[name] = {"offset": offset, "shape": list(t.shape)}
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    index = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config_echo,
        "seed": seed,
        "epoch": epoch,
        "total_bytes": offset,
        "tensors": tensors,
    }
    atomic_write_bytes(os.path.join(directory, PARAMS_NAME), b"".join(blobs))
    atomic_write_text(os.path.join(directory, INDEX_NAME),
                      json.dumps(index, sort_keys=True, indent=1) + "\n")


def load_checkpoint(directory: str) -> Checkpoint:
    index_path = os.path.join(directory, INDEX_NAME)
    params_path = os.path.join(directory, PARAMS_NAME)
    if not os.path.exists(index_path) or not os.path.exists(params_path):
        raise MissingInput(f"no checkpoint at {directory}")
    with open(index_path) as f:
        index = json.load(f)
    if index.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {index.get('format_version')!r}, "
                              f"expected {CHECKPOINT_FORMAT_VERSION}")
    with open(params_path, "rb") as f:
        payload = f.read()
    if len(payload) != index["total_bytes"]:
        raise InvalidRecord(f"params.bin holds {len(payload)} bytes, "
                            f"index expects {index['total_bytes']}")
    state = {}
    for name, meta in index["tensors"].items():
        shape = tuple(meta["shape"])
        numel = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        end = start + numel * 4
        if end > len(payload):
            raise InvalidRecord(f"tensor {name} overruns params.bin")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    return Checkpoint(config=index["config"], seed=index["seed"],
                      epoch=index["epoch"], state=state)
