"""Checkpoint container: JSON metadata header followed by raw tensors.

Layout:
    8-byte magic  b"GCCKPT01"
    8-byte little-endian header length
    UTF-8 JSON header (sorted keys)
    concatenated little-endian tensor bytes

The header lists every tensor's name, shape, dtype, and offset, so the
format is readable from any language without torch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import ConditionedDenoiser, DenoiserConfig
from .schedule import NoiseSchedule, schedule_from_config

MAGIC = b"GCCKPT01"
FORMAT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


class CheckpointError(ValueError):
    """Raised for malformed or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    arch: DenoiserConfig
    schedule: NoiseSchedule
    class_names: list[str]
    state: dict[str, torch.Tensor]
    ema_state: dict[str, torch.Tensor]
    step: int
    metadata: dict = field(default_factory=dict)

    def build_model(self, use_ema: bool = True) -> ConditionedDenoiser:
        model = ConditionedDenoiser(self.arch)
        state = self.ema_state if use_ema else self.state
        model.load_state_dict(state)
        model.eval()
        return model

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().numpy()
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr.tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    named = [(f"model.{k}", v) for k, v in ckpt.state.items()]
    named += [(f"ema.{k}", v) for k, v in ckpt.ema_state.items()]
    for name, tensor in named:
        data = _tensor_bytes(tensor)
        dtype = str(tensor.detach().cpu().numpy().dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {dtype} for {name}")
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)

    header = {
        "format_version": FORMAT_VERSION,
        "arch": ckpt.arch.to_dict(),
        "schedule": ckpt.schedule.to_config(),
        "class_names": ckpt.class_names,
        "step": ckpt.step,
        "metadata": ckpt.metadata,
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {header['format_version']}"
            )
        data = f.read()

    state: dict[str, torch.Tensor] = {}
    ema_state: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensor = torch.from_numpy(arr.copy())
        name = entry["name"]
        if name.startswith("model."):
            state[name[len("model.") :]] = tensor
        elif name.startswith("ema."):
            ema_state[name[len("ema.") :]] = tensor
        else:
            raise CheckpointError(f"unknown tensor namespace in {name!r}")

    return Checkpoint(
        arch=DenoiserConfig.from_dict(header["arch"]),
        schedule=schedule_from_config(header["schedule"]),
        class_names=list(header["class_names"]),
        state=state,
        ema_state=ema_state,
        step=int(header["step"]),
        metadata=header.get("metadata", {}),
    )
