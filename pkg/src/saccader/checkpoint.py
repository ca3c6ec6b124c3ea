"""Binary checkpoints.

Layout, all little-endian::

    b"SACC" | u32 version | u32 block count
    per block: u32 name length | utf-8 name | u32 rank | u32 dims[rank] | f32 payload
    u32 metadata length | utf-8 JSON (config snapshot, step, optimizer scalars)
    u32 CRC-32 of everything above

Optimizer moment tensors are stored as ordinary blocks under ``optim/``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SACC"
VERSION = 1
OPTIM_PREFIX = "optim/"


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    blocks: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def parameters(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.blocks.items() if not k.startswith(OPTIM_PREFIX)}

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))


def _f32(t) -> np.ndarray:
    a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if a.dtype != np.float32:
        raise CheckpointError(f"only float32 tensors can be stored, got {a.dtype}")
    return np.ascontiguousarray(a).astype("<f4", copy=False)


def encode(blocks: dict[str, np.ndarray], meta: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, a in blocks.items():
        a = _f32(a)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    js = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(js)) + js)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint is truncated")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self, count: int = 1):
        v = struct.unpack(f"<{count}I", self.take(4 * count))
        return v[0] if count == 1 else v


def _parse(body: bytes, count: int) -> Checkpoint:
    r = _Reader(body)
    r.take(12)
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        blocks[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
    meta = r.take(r.u32())
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after metadata")
    return Checkpoint(blocks, json.loads(meta.decode("utf-8")))


def decode(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    version, count = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if zlib.crc32(body) != crc:
        # name the likelier cause: a short file fails the structural walk first
        try:
            _parse(body, count)
        except CorruptCheckpointError:
            raise
        except ValueError:
            pass
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    return _parse(body, count)


def _optimizer_blocks(opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    blocks, scalars = {}, {}
    for pid, state in sorted(sd["state"].items()):
        for key, v in sorted(state.items()):
            if isinstance(v, torch.Tensor) and v.dim() > 0:
                blocks[f"{OPTIM_PREFIX}{pid}/{key}"] = _f32(v)
            else:
                scalars[f"{pid}/{key}"] = float(v)
    groups = [{k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]]
    return blocks, {"state": scalars, "groups": json.loads(json.dumps(groups, default=str))}


def save_checkpoint(
    model: torch.nn.Module,
    path: str | Path,
    config: dict | None = None,
    step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
) -> bytes:
    blocks = {k: _f32(v) for k, v in model.state_dict().items()}
    meta = {"config": config or {}, "step": int(step)}
    if optimizer is not None:
        ob, scalars = _optimizer_blocks(optimizer)
        blocks.update(ob)
        meta["optimizer"] = scalars
    data = encode(blocks, meta)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def restore(model: torch.nn.Module, ckpt: Checkpoint) -> torch.nn.Module:
    """Copy parameters into ``model``; names and shapes must match exactly."""
    sd = model.state_dict()
    params = ckpt.parameters
    missing = sorted(set(sd) - set(params))
    extra = sorted(set(params) - set(sd))
    if missing or extra:
        raise ShapeMismatchError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in sd.items():
        if tuple(v.shape) != params[k].shape:
            raise ShapeMismatchError(f"{k}: checkpoint has {params[k].shape}, model expects {tuple(v.shape)}")
    model.load_state_dict({k: torch.from_numpy(params[k].astype(np.float32)) for k in sd})
    return model


def restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint):
    info = ckpt.meta.get("optimizer")
    if info is None:
        raise CheckpointError("checkpoint holds no optimizer state")
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    for name, a in ckpt.blocks.items():
        if name.startswith(OPTIM_PREFIX):
            pid, key = name[len(OPTIM_PREFIX) :].split("/", 1)
            state.setdefault(int(pid), {})[key] = torch.from_numpy(a.copy())
    for name, v in info["state"].items():
        pid, key = name.split("/", 1)
        state.setdefault(int(pid), {})[key] = torch.tensor(v)
    sd["state"] = state
    optimizer.load_state_dict(sd)
