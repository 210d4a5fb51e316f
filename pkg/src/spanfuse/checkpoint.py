"""Deterministic checkpoint serialization.

torch.save output is not byte-stable across processes, which breaks
reproducibility checks that hash artifacts. This module writes tensors as a
sorted JSON header plus raw little-endian buffers, so identical states always
produce identical bytes.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

log = logging.getLogger(__name__)

MAGIC = b"SPANFUSE-CKPT1\n"

_DTYPE_TO_NUMPY = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
    "bool": "|b1",
}
_NUMPY_TO_TORCH = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}


class CheckpointError(ValueError):
    """Malformed, truncated, or unsupported checkpoint file."""


def _dtype_name(tensor: torch.Tensor) -> str:
    name = str(tensor.dtype).removeprefix("torch.")
    if name not in _DTYPE_TO_NUMPY:
        raise CheckpointError(f"unsupported tensor dtype {name}")
    return name


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> None:
    """Write tensors and JSON metadata with deterministic bytes.

    Tensors are stored in sorted name order as raw little-endian buffers.
    ``meta`` must be JSON-serializable.
    """
    entries = []
    buffers = []
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        dtype = _dtype_name(tensor)
        array = tensor.numpy().astype(_DTYPE_TO_NUMPY[dtype], copy=False)
        buffers.append(array.tobytes())
        entries.append({"name": name, "dtype": dtype, "shape": list(tensor.shape)})
    header = {"format": "spanfuse-checkpoint", "version": 1, "meta": meta or {}, "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        for buf in buffers:
            f.write(buf)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a checkpoint back as (tensors, meta). Round-trips bit-exactly."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a spanfuse checkpoint")
    offset = len(MAGIC)
    if len(raw) < offset + 8:
        raise CheckpointError(f"{path}: truncated header length")
    header_len = int.from_bytes(raw[offset : offset + 8], "little")
    offset += 8
    if len(raw) < offset + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    offset += header_len
    if header.get("format") != "spanfuse-checkpoint" or header.get("version") != 1:
        raise CheckpointError(f"{path}: unknown format or version")
    tensors: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _NUMPY_TO_TORCH:
            raise CheckpointError(f"{path}: unsupported dtype {dtype}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * np.dtype(_DTYPE_TO_NUMPY[dtype]).itemsize
        if len(raw) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        array = np.frombuffer(raw, dtype=_DTYPE_TO_NUMPY[dtype], count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(array.copy()).to(_NUMPY_TO_TORCH[dtype])
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, header.get("meta", {})


def state_dict_tensors(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    """Module state dict filtered to tensors (buffers included)."""
    return {k: v for k, v in module.state_dict().items() if isinstance(v, torch.Tensor)}
