"""Self-describing checkpoint container.

Layout: magic, format version, a JSON header (model kind, config,
vocabulary version and hash, arbitrary extras such as optimizer RNG
state), then named tensors as little-endian float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..tokenizer import VOCAB

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"RFCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_kind: str
    config: dict
    tensors: dict[str, torch.Tensor]
    extra: dict

    @property
    def vocab_version(self) -> str:
        return self.config["vocab_version"]


def save_checkpoint(
    path: str | Path,
    *,
    model_kind: str,
    config: dict,
    tensors: dict[str, torch.Tensor],
    extra: dict | None = None,
) -> None:
    header = {
        "model_kind": model_kind,
        "config": {**config, "vocab_version": VOCAB.version},
        "vocab_hash": VOCAB.version_hash,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            tensor = tensors[name].detach().to(torch.float32).contiguous()
            data = tensor.numpy().astype("<f4").tobytes()
            name_bytes = name.encode()
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", tensor.dim()))
            fh.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<HI", blob[4:10])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format version {version}")
    pos = 10
    header = json.loads(blob[pos : pos + header_len])
    pos += header_len
    if header.get("vocab_hash") != VOCAB.version_hash:
        raise ValueError(
            f"{path}: checkpoint vocabulary {header.get('config', {}).get('vocab_version')!r} "
            f"does not match the active vocabulary {VOCAB.version!r}"
        )
    (count,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", blob[pos : pos + 2])
        pos += 2
        name = blob[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack("<B", blob[pos : pos + 1])
        pos += 1
        shape = struct.unpack(f"<{ndim}I", blob[pos : pos + 4 * ndim])
        pos += 4 * ndim
        (nbytes,) = struct.unpack("<Q", blob[pos : pos + 8])
        pos += 8
        array = np.frombuffer(blob[pos : pos + nbytes], dtype="<f4").reshape(shape)
        pos += nbytes
        tensors[name] = torch.from_numpy(array.copy())
    return Checkpoint(
        model_kind=header["model_kind"],
        config=header["config"],
        tensors=tensors,
        extra=header.get("extra", {}),
    )
