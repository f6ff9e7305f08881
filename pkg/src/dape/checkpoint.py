"""Single-file checkpoints: magic, JSON header, then named float64 blobs.

Layout::

    b"DAPECKPT" | uint64 LE header length | header JSON (utf-8) | blobs

The header carries caller metadata plus, per tensor, its name, shape, original
dtype and byte offset into the blob section. Every tensor is stored as
little-endian float64, which round-trips float32 and small integers exactly.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DAPECKPT"


def save_checkpoint(path, state: dict, header: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    head = json.dumps({**header, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    base = 16 + n
    state = OrderedDict()
    for e in header.pop("tensors"):
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f8").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(getattr(torch, e["dtype"]))
    return header, state
