"""Single-file checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 JSON header length,
UTF-8 JSON header, raw little-endian tensor blob. The header carries the
backbone config, the training-step counter, free-form metadata, and a
name -> (shape, dtype, offset) table for every tensor in the blob.

Tensors default to float32 on disk; float64 entries are allowed so that
64-bit training can resume bit-exactly. Writes are atomic (temp + rename).
Loading validates every model parameter shape against the config and
rejects unknown names.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
import torch

MAGIC = b"JDIFFCKP"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (np.dtype("<f4"), torch.float32),
    "float64": (np.dtype("<f8"), torch.float64),
    "int64": (np.dtype("<i8"), torch.int64),
    "uint8": (np.dtype("u1"), torch.uint8),
}
_TORCH_TO_NAME = {t: n for n, (_, t) in _DTYPES.items()}


@dataclass
class Checkpoint:
    backbone_config: dict
    step: int
    tensors: dict[str, torch.Tensor]
    meta: dict


def write_checkpoint(path, backbone_config: dict, step: int,
                     tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        dtype_name = _TORCH_TO_NAME.get(t.dtype)
        if dtype_name is None:
            raise ValueError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        np_dtype = _DTYPES[dtype_name][0]
        raw = t.numpy().astype(np_dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape),
                        "dtype": dtype_name, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = json.dumps({
        "backbone_config": backbone_config,
        "step": int(step),
        "meta": meta or {},
        "tensors": entries,
    }).encode("utf-8")

    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for raw in blobs:
                f.write(raw)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: format version {version} != {FORMAT_VERSION}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()

    tensors = {}
    for e in header["tensors"]:
        np_dtype, torch_dtype = _DTYPES[e["dtype"]]
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(torch_dtype)
    return Checkpoint(backbone_config=header["backbone_config"],
                      step=header["step"], tensors=tensors, meta=header["meta"])


def load_model_params(model: torch.nn.Module, tensors: dict[str, torch.Tensor],
                      prefix: str = "model.") -> None:
    """Load 'prefix*' tensors into the model, validating names and shapes."""
    state = model.state_dict()
    seen = set()
    for name, t in tensors.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):]
        if key not in state:
            raise ValueError(f"unknown parameter {key!r} in checkpoint")
        if tuple(t.shape) != tuple(state[key].shape):
            raise ValueError(f"shape mismatch for {key!r}: checkpoint "
                             f"{tuple(t.shape)} vs model {tuple(state[key].shape)}")
        state[key] = t.to(state[key].dtype)
        seen.add(key)
    missing = set(state) - seen
    if missing:
        raise ValueError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")
    model.load_state_dict(state)
