"""Binary checkpoints: ``TSC1`` magic, version, config echo, named float32 tensors.

Layout (all integers u32 little-endian)::

    "TSC1" | version | config_len | config JSON (UTF-8) | n_params |
    n_params x (name_len | name | rank | dims[rank] | float32 LE payload)
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import canonical_json, validate
from .encoder import FormatError
from .model import SiameseHead

MAGIC = b"TSC1"
VERSION = 1
_U32 = struct.Struct("<I")


class ConfigMismatchError(FormatError):
    pass


def save_checkpoint(path, cfg: dict, state) -> None:
    parts = [MAGIC, _U32.pack(VERSION)]
    blob = canonical_json(cfg).encode("utf-8")
    parts += [_U32.pack(len(blob)), blob, _U32.pack(len(state))]
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated {what}", offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def load_checkpoint(path, expected_config: dict | None = None):
    """Return ``(config, state)``; raise if ``expected_config`` differs from the echo."""
    rd = _Reader(Path(path).read_bytes(), path)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic", offset=0)
    version = rd.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    cfg_len = rd.u32("config length")
    at = rd.pos
    try:
        cfg = json.loads(rd.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable config ({exc})", offset=at) from None
    if expected_config is not None and canonical_json(expected_config) != canonical_json(cfg):
        raise ConfigMismatchError(f"{path}: checkpoint config does not match the loading config")
    state = OrderedDict()
    for _ in range(rd.u32("parameter count")):
        name = rd.take(rd.u32("name length"), "name").decode("utf-8")
        rank = rd.u32(f"rank of {name}")
        if rank > 8:
            raise FormatError(f"{path}: implausible rank {rank} for {name}", offset=rd.pos - 4)
        dims = tuple(rd.u32(f"dims of {name}") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64))
        payload = rd.take(4 * n, f"payload of {name}")
        state[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if rd.pos != len(rd.raw):
        raise FormatError(f"{path}: trailing bytes after last parameter", offset=rd.pos)
    return cfg, state


def load_model(path, expected_config: dict | None = None) -> SiameseHead:
    cfg, state = load_checkpoint(path, expected_config)
    model = SiameseHead(validate(cfg))
    try:
        model.params.load_state_dict(state)
    except ValueError as exc:
        raise FormatError(f"{path}: parameters do not fit the stored config ({exc})") from None
    return model


def save_model(path, model: SiameseHead) -> None:
    save_checkpoint(path, model.cfg, model.params.state_dict())
