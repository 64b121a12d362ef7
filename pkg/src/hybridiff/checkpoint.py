"""Bit-exact checkpoint files.

Layout (all integers little-endian)::

    magic         8 bytes   b"HYDFCKPT"
    version       u32
    header_len    u64
    header        header_len bytes of UTF-8 "key = <json value>" lines
    n_tensors     u32
    per tensor:
        name_len  u16, name (UTF-8)
        dtype     2 ASCII bytes: f4 f8 i8 i4 u1 b1
        ndim      u8, then ndim x u64 dims
        data      raw little-endian values, C order

Header keys are ``config.<field>`` for the model config and ``meta.<key>`` for
stage metadata (step, stage, eval score, seed, ...).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ModelConfig

MAGIC = b"HYDFCKPT"
VERSION = 1

_TAGS = {torch.float32: b"f4", torch.float64: b"f8", torch.int64: b"i8", torch.int32: b"i4",
         torch.uint8: b"u1", torch.bool: b"b1"}
_NP = {b"f4": "<f4", b"f8": "<f8", b"i8": "<i8", b"i4": "<i4", b"u1": "u1", b"b1": "?"}
_TORCH = {v: k for k, v in _TAGS.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[len("model."):]: v for k, v in self.tensors.items() if k.startswith("model.")}

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _header(config: ModelConfig, meta: dict) -> bytes:
    lines = [f"config.{k} = {json.dumps(v)}" for k, v in config.to_dict().items()]
    lines += [f"meta.{k} = {json.dumps(v)}" for k, v in meta.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_header(text: str):
    config, meta = {}, {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        section, _, name = key.partition(".")
        (config if section == "config" else meta)[name] = json.loads(value)
    return ModelConfig.from_dict(config), meta


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header(ckpt.config, ckpt.meta)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(ckpt.tensors)))
        for name, t in ckpt.tensors.items():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _TAGS:
                raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
            tag = _TAGS[t.dtype]
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)) + raw + tag + struct.pack("<B", t.dim()))
            f.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            f.write(t.numpy().astype(_NP[tag], copy=False).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 20
    config, meta = _parse_header(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        tag = data[pos:pos + 2]
        ndim = data[pos + 2]
        pos += 3
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        arr = np.frombuffer(data, dtype=_NP[tag], count=int(np.prod(shape, dtype=np.int64)), offset=pos)
        pos += arr.nbytes
        tensors[name] = torch.from_numpy(arr.reshape(shape).copy()).to(_TORCH[tag])
    return Checkpoint(tensors, config, meta)


def load_model_state(model: torch.nn.Module, ckpt: Checkpoint, skip: tuple[str, ...] = ()) -> None:
    """Copy checkpoint weights into ``model``; fails on the first mismatching tensor."""
    state = ckpt.model_state()
    own = model.state_dict()
    for name in own:
        if name in skip:
            continue
        if name not in state:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if state[name].shape != own[name].shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {tuple(state[name].shape)} "
                                  f"!= model shape {tuple(own[name].shape)}")
    extra = [n for n in state if n not in own]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {extra[0]!r}")
    with torch.no_grad():
        for name, t in own.items():
            if name not in skip:
                t.copy_(state[name])
