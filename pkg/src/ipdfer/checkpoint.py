"""Checkpoint container.

Layout (little-endian)::

    magic        8 bytes  b"IPDFCK\\x00\\x01"
    header_len   uint32
    header       UTF-8 JSON, sorted keys:
                   version, kind ("identity" | "bundle"), model_config,
                   e_id_digest, frozen, epoch, extra {...},
                   tensors [{name, shape, offset, count}, ...]
    payload      concatenated float32 tensors; ``offset`` counts bytes
                 from the start of the payload

Tensor names are ``<network>.<param>`` for weights and
``opt.<optimizer>.<network>.<param>.<exp_avg|exp_avg_sq>`` for Adam moments.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"IPDFCK\x00\x01"
VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().to(torch.float32).numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header, version=VERSION, tensors=index)
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(blob)).astype("<u4").tobytes())
        fh.write(blob)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    n = int(np.frombuffer(raw, "<u4", 1, 8)[0])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 12 + n
    tensors = {}
    for t in header["tensors"]:
        arr = np.frombuffer(raw, "<f4", t["count"], base + t["offset"]).reshape(t["shape"])
        tensors[t["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, header
