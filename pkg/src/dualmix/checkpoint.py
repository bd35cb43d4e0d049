"""Versioned little-endian checkpoint files.

Layout::

    magic            8 bytes  b"DMXCKPT\\0"
    version          u32
    config           u32 length + UTF-8 JSON (model config, may be empty)
    tensor table     u32 count, then per tensor:
                        u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
                        prod(dims) x f32 data
    footer           b"STAT", u32 epoch, u64 step, then a second tensor table
                     holding optimizer moments (exp_avg/<name>, exp_avg_sq/<name>)
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DMXCKPT\0"
FOOTER = b"STAT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)


def _write_table(buf: io.BytesIO, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _read_table(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(buf, 4 * size), dtype="<f4").reshape(shape)
        out[name] = data.copy()
    return out


def encode(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(ck.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_table(buf, ck.tensors)
    buf.write(FOOTER)
    buf.write(struct.pack("<IQ", ck.epoch, ck.step))
    _write_table(buf, ck.moments)
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    buf = io.BytesIO(data)
    if _read_exact(buf, 8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", _read_exact(buf, 4))
    config = json.loads(_read_exact(buf, clen).decode("utf-8")) if clen else {}
    tensors = _read_table(buf)
    if _read_exact(buf, 4) != FOOTER:
        raise CheckpointError("missing training-state footer")
    epoch, step = struct.unpack("<IQ", _read_exact(buf, 12))
    moments = _read_table(buf)
    if buf.read(1):
        raise CheckpointError("trailing bytes after footer")
    return Checkpoint(tensors, config, epoch, step, moments)


def save(path, ck: Checkpoint) -> Path:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ck))
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def from_model(model: torch.nn.Module, config: dict, optimizer: torch.optim.Optimizer | None = None,
               epoch: int = 0, step: int = 0) -> Checkpoint:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    moments = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p, {})
                for key in ("exp_avg", "exp_avg_sq"):
                    if key in st:
                        moments[f"{key}/{names[id(p)]}"] = st[key].detach().cpu().numpy()
                if "step" in st:
                    moments[f"step/{names[id(p)]}"] = np.asarray(float(st["step"]), dtype=np.float32)
    return Checkpoint(tensors, config, epoch, step, moments)


def load_into(model: torch.nn.Module, ck: Checkpoint, optimizer: torch.optim.Optimizer | None = None) -> None:
    state = model.state_dict()
    missing = set(state) - set(ck.tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    model.load_state_dict({k: torch.as_tensor(ck.tensors[k], dtype=state[k].dtype) for k in state})
    if optimizer is None or not ck.moments:
        return
    params = dict(model.named_parameters())
    for name, p in params.items():
        if f"exp_avg/{name}" not in ck.moments:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(ck.moments[f"step/{name}"])),
            "exp_avg": torch.as_tensor(ck.moments[f"exp_avg/{name}"], dtype=p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(ck.moments[f"exp_avg_sq/{name}"], dtype=p.dtype).clone(),
        }
