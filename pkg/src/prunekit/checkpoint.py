"""Binary checkpoint format for model states.

Layout, all integers little-endian:

    magic   b"PKPT"
    u32     format version (currently 1)
    u32     byte length of the config block
    bytes   config as "key=value" lines, utf-8
    u32     parameter count
    per parameter:
        u16     name byte length
        bytes   name, utf-8
        u8      rank
        u32*r   dims
        f32*n   raw row-major values

Round-trips are bit-exact: values are written straight from the float32
buffers.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import ModelConfig, ModelState, shape_audit
from .tensor import Tensor

MAGIC = b"PKPT"
VERSION = 1

_CONFIG_FIELDS = (
    "vocab_size",
    "max_seq_len",
    "d_model",
    "n_blocks",
    "n_heads",
    "d_head",
    "d_ffn",
    "tie_embeddings",
)


class CheckpointError(ValueError):
    """Malformed checkpoint; the message names the offending field."""


def _config_block(config: ModelConfig) -> bytes:
    lines = []
    for field in _CONFIG_FIELDS:
        value = getattr(config, field)
        lines.append(f"{field}={int(value)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config(block: bytes) -> ModelConfig:
    values = {}
    for line in block.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        if not _:
            raise CheckpointError(f"config line without '=': {line!r}")
        values[key.strip()] = raw.strip()
    kwargs = {}
    for field in _CONFIG_FIELDS:
        if field not in values:
            raise CheckpointError(f"config block missing field {field}")
        try:
            kwargs[field] = int(values[field])
        except ValueError:
            raise CheckpointError(f"config field {field} is not an integer") from None
    kwargs["tie_embeddings"] = bool(kwargs["tie_embeddings"])
    return ModelConfig(**kwargs)


def save_model(model: ModelState, path) -> None:
    violations = shape_audit(model)
    if violations:
        raise CheckpointError(f"refusing to save inconsistent model: {violations[0]}")
    cfg = _config_block(model.config)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = model.params[name].data
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {field}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, field))


def load_model(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a PKPT checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (cfg_len,) = r.unpack("<I", "config length")
    config = _parse_config(r.take(cfg_len, "config block"))
    (n_params,) = r.unpack("<I", "parameter count")
    params: dict[str, Tensor] = {}
    for i in range(n_params):
        (name_len,) = r.unpack("<H", f"name length of parameter {i}")
        name = r.take(name_len, f"name of parameter {i}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        count = int(np.prod(dims)) if dims else 1
        raw = r.take(4 * count, f"values of {name}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        params[name] = Tensor(arr)
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after last parameter")
    model = ModelState(config=config, params=params)
    violations = shape_audit(model)
    if violations:
        raise CheckpointError(f"checkpoint inconsistent with its config: {violations[0]}")
    return model
