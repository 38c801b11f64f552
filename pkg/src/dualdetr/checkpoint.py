"""Checkpoint container.

Layout (all integers little-endian u32):

    magic  b"DDTRCKPT"
    version
    config_len, config text (utf-8, flat key = value lines)
    count
    count x { name_len, name (utf-8), ndim, dims[ndim], float32 LE values (row-major) }
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import ConfigError, FormatError

MAGIC = b"DDTRCKPT"
VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(path: str | Path, model: torch.nn.Module, cfg: RunConfig) -> Path:
    path = Path(path)
    state = model.state_dict()
    cfg_bytes = cfg.to_text().encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_U32.pack(VERSION))
        fh.write(_U32.pack(len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(_U32.pack(len(state)))
        for name, t in state.items():
            nb = name.encode("utf-8")
            fh.write(_U32.pack(len(nb)))
            fh.write(nb)
            fh.write(_U32.pack(t.dim()))
            for s in t.shape:
                fh.write(_U32.pack(s))
            fh.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return path


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"{self.source}: truncated at byte {self.pos}, needed {n} more bytes")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_checkpoint(path: str | Path) -> tuple[RunConfig, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(8) != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = RunConfig.from_text(r.take(r.u32()).decode("utf-8"), check_paths=False)
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes at byte {r.pos}")
    return cfg, tensors


def load_into(model: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    """Copy tensors into ``model``; any name or shape disagreement is an error."""
    state = model.state_dict()
    for name in state:
        if name not in tensors:
            raise ConfigError(f"checkpoint is missing parameter {name}")
    for name, arr in tensors.items():
        if name not in state:
            raise ConfigError(f"checkpoint parameter {name} does not exist in the model")
        if tuple(state[name].shape) != arr.shape:
            raise ConfigError(f"shape mismatch for parameter {name}: checkpoint {arr.shape}, "
                              f"model {tuple(state[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in tensors.items()})


def load_model(path: str | Path, cfg: RunConfig | None = None):
    """Rebuild a model from a checkpoint, optionally checking it against ``cfg``."""
    from .model import DualDETR

    stored, tensors = read_checkpoint(path)
    model = DualDETR(cfg or stored)
    load_into(model, tensors)
    model.eval()
    return model, stored
