"""RZ3D checkpoint files: a named float32 tensor table with a trailing CRC32.

Layout (all integers little-endian u32)::

    b"RZ3D" | version | count | { name_len | name | ndim | dims... | f32 data }* | crc32

The CRC covers every byte before it.  Tensors are written in sorted name
order so that saving the same state twice yields identical bytes.
"""

from __future__ import annotations

import os
import struct
import zlib
from typing import Iterable, Mapping

import numpy as np

from .adapters import AdapterKind, attach
from .backbone import Backbone, BackboneConfig
from .errors import ChecksumError, CheckpointError

MAGIC = b"RZ3D"
VERSION = 1
_U32 = struct.Struct("<I")


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state))]
    for name in sorted(state):
        arr = np.array(state[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an RZ3D checkpoint")
    body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    version, count = _U32.unpack_from(body, 4)[0], _U32.unpack_from(body, 8)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    wanted = None if names is None else set(names)
    out: dict[str, np.ndarray] = {}
    pos = 12
    try:
        for _ in range(count):
            (n,) = _U32.unpack_from(body, pos)
            name = body[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = _U32.unpack_from(body, pos)
            shape = struct.unpack_from(f"<{ndim}I", body, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(body):
                raise CheckpointError(f"tensor {name!r} runs past the end of the file")
            if wanted is None or name in wanted:
                out[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after the tensor table")
    if wanted is not None and wanted - out.keys():
        raise CheckpointError(f"tensors not in checkpoint: {sorted(wanted - out.keys())[:5]}")
    return out


def save_checkpoint(path: str | os.PathLike, state: Mapping[str, np.ndarray]) -> None:
    blob = encode(state)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; ``names`` restricts the result to those tensors."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    return decode(blob, names)


def save_model(path: str | os.PathLike, model: Backbone) -> None:
    save_checkpoint(path, model.state_dict())


def _slot_kind(slot: str) -> AdapterKind:
    for kind in AdapterKind:
        if kind.value == slot:
            return kind
    raise CheckpointError(f"unknown adapter slot {slot!r}")


def attach_from_state(model: Backbone, state: Mapping[str, np.ndarray]) -> list[AdapterKind]:
    """Attach whatever adapter families ``state`` holds, sized from its shapes."""
    kinds: list[AdapterKind] = []
    if "switcher.e_syn" in state:
        attach(model, AdapterKind.SWITCHER, np.random.default_rng(0), switch_dim=state["switcher.e_syn"].shape[0])
        kinds.append(AdapterKind.SWITCHER)
    for slot in sorted({n.split(".")[3] for n in state if n.startswith("blocks.0.adapters.")}):
        kind = _slot_kind(slot)
        prefix = f"blocks.0.adapters.{slot}."
        if kind is AdapterKind.SHIFTER:
            rank = state[prefix + "w_left"].shape[1]
        elif kind in (AdapterKind.LORA, AdapterKind.DOMAIN):
            rank = state[prefix + "q.down"].shape[1]
        else:
            rank = state[prefix + "map.down"].shape[1]
        attach(model, kind, np.random.default_rng(0), rank=rank)
        kinds.append(kind)
    return kinds


def load_model(path: str | os.PathLike, cfg: BackboneConfig) -> Backbone:
    """Rebuild a backbone (plus its adapters) from a checkpoint."""
    state = load_checkpoint(path)
    model = Backbone(cfg, seed=0)
    attach_from_state(model, state)
    model.load_state_dict(state, strict=True)
    return model
