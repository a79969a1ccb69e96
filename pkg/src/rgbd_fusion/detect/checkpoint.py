"""Binary checkpoint container.

Layout::

    b"RGBDCKPT" | u32 version | u32 header length | JSON header | tensor payload | sha256

The header records the variant, arch config, seed, channel-stats reference,
arbitrary metadata and, per tensor, its name, shape and byte offset. Tensors
are little-endian float32. The trailing digest covers everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import CorruptCheckpoint, IoFailure
from ..fusion import VariantKind
from .model import ArchConfig, DetectorModel

MAGIC = b"RGBDCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    variant: VariantKind
    arch: ArchConfig
    seed: int
    state: dict[str, torch.Tensor]
    channel_stats: str | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: DetectorModel, seed: int, channel_stats: str | None = None, **meta) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.variant, model.arch, seed, state, channel_stats, meta)

    def to_model(self) -> DetectorModel:
        model = DetectorModel(self.variant, self.arch)
        model.load_state_dict({k: v.to(next(iter(model.state_dict().values())).dtype) for k, v in self.state.items()})
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors, payload, offset = [], [], 0
    for name, t in ckpt.state.items():
        raw = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({
        "variant": ckpt.variant.value, "arch": ckpt.arch.to_dict(), "seed": ckpt.seed,
        "channel_stats": ckpt.channel_stats, "meta": ckpt.meta, "tensors": tensors,
    }, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(payload)
    try:
        Path(path).write_bytes(body + hashlib.sha256(body).digest())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
        raise CorruptCheckpoint(f"{path} is not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen])
    data = body[start + hlen:]
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=t["nbytes"] // 4, offset=t["offset"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(
        VariantKind(header["variant"]), ArchConfig.from_dict(header["arch"]), int(header["seed"]), state,
        header.get("channel_stats"), header.get("meta", {}),
    )
