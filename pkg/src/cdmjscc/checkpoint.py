"""Checkpoint container and its binary file format.

Layout (little-endian): magic ``CDMJ``, u16 version, u32-length-prefixed
UTF-8 config block of ``key=value`` lines, u32 record count, then per record
a u16-length-prefixed UTF-8 name, u8 rank, u64 dims and float64 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_mapping, config_to_mapping
from .errors import FormatError, MagicError, TruncatedError, VersionError
from .transforms import CdmJscc, ModelConfig

CKPT_MAGIC = b"CDMJ"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    stage: int
    config: TrainConfig
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list, compare=False, repr=False)

    def build_model(self) -> CdmJscc:
        model = CdmJscc(self.model_config, seed=self.config.seed)
        load_into(model, self.params)
        return model


def snapshot(model: CdmJscc, cfg: TrainConfig, stage: int, history=None) -> Checkpoint:
    params = {p.name: p.value.data.copy() for p in model.parameters()}
    return Checkpoint(stage, cfg, model.cfg, params, list(history or []))


def load_into(model: CdmJscc, params: dict[str, np.ndarray]) -> None:
    named = model.named_parameters()
    missing = set(named) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in named.items():
        value = params[name]
        if value.shape != p.value.shape:
            raise FormatError(f"{name}: checkpoint shape {value.shape} != model shape {p.value.shape}")
        p.value.data = value.astype(p.value.data.dtype, copy=True)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    mapping = config_to_mapping(ckpt.config, ckpt.model_config)
    mapping["stage"] = str(ckpt.stage)
    block = "".join(f"{k}={v}\n" for k, v in mapping.items()).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(block)), block,
             struct.pack("<I", len(ckpt.params))]
    for name, value in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CKPT_MAGIC:
        raise MagicError("not a CDMJ checkpoint (bad magic)")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    (block_len,) = r.unpack("<I")
    lines = r.take(block_len).decode("utf-8").splitlines()
    mapping = dict(line.split("=", 1) for line in lines if line)
    stage = int(mapping.pop("stage", "0"))
    cfg, model_cfg = config_from_mapping(mapping)
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).copy()
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint records")
    return Checkpoint(stage, cfg, model_cfg, params)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
