"""Versioned little-endian tensor container.

Layout::

    b"PGRD"                      magic
    u32   version (= 1)
    u8    kind (0 = vit, 1 = cnn, 2 = generic tensor bundle)
    u32   byte length of the header block
    ...   UTF-8 ``key=value`` lines, '\\n'-separated, keys sorted
    u32   tensor count
    per tensor:
        u16 name length, name bytes (UTF-8)
        u8  ndim, ndim x u32 dims
        float64 payload, row-major
    u32   CRC32 of every preceding byte

Model checkpoints store the config in the header block; perturbation and
dataset dumps use kind 2 with free-form metadata.
"""
from __future__ import annotations

import dataclasses
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    ShapeMismatchError,
    TensorCountError,
    TruncatedError,
    VersionMismatchError,
)
from .types import CNNConfig, ModelHandle, ViTConfig

MAGIC = b"PGRD"
VERSION = 1
KINDS = {"vit": 0, "cnn": 1, "bundle": 2}
_KIND_NAMES = {v: k for k, v in KINDS.items()}


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def encode_meta(meta: dict) -> bytes:
    lines = []
    for key in sorted(meta):
        val = _fmt_value(meta[key])
        if "\n" in key or "=" in key or "\n" in val:
            raise ConfigError(f"metadata entry {key!r} cannot be encoded")
        lines.append(f"{key}={val}")
    return "\n".join(lines).encode("utf-8")


def decode_meta(raw: bytes) -> dict:
    meta = {}
    text = raw.decode("utf-8")
    for line in text.split("\n") if text else []:
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed header line {line!r}")
        meta[key] = val
    return meta


def write_container(path, kind: str, meta: dict, tensors: dict) -> None:
    """Serialize ``tensors`` (name -> array) with ``meta`` to ``path``."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IB", VERSION, KINDS[kind])
    header = encode_meta(meta)
    buf += struct.pack("<I", len(header)) + header
    buf += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"file truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path):
    """Returns ``(kind, meta, tensors)``; raises a distinct error per failure mode."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r} in {path}")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")
    (kind_code,) = r.unpack("<B")
    if kind_code not in _KIND_NAMES:
        raise ConfigError(f"unknown container kind {kind_code}")
    (hlen,) = r.unpack("<I")
    meta = decode_meta(r.take(hlen))
    (count,) = r.unpack("<I")
    tensors = {}
    for i in range(count):
        if len(data) - r.pos == 4:
            raise TensorCountError(f"header declares {count} tensors but the file holds {i}")
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        payload = r.take(8 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise TensorCountError(
            f"{len(data) - r.pos} unread bytes after {count} declared tensors"
        )
    if zlib.crc32(data[:body_end]) != crc:
        raise ChecksumError(f"CRC32 mismatch in {path}")
    return _KIND_NAMES[kind_code], meta, tensors


# -- model configs <-> header lines -------------------------------------------


def config_to_meta(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_from_meta(kind: str, meta: dict):
    cls = ViTConfig if kind == "vit" else CNNConfig
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in meta:
            raise ConfigError(f"config key {f.name!r} missing from header")
        raw = meta[f.name]
        if f.name == "use_class_token":
            kwargs[f.name] = raw == "true"
        elif f.name in ("conv_channels", "pools"):
            kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
        else:
            kwargs[f.name] = int(raw)
    return cls(**kwargs)


def _expected_shapes(kind, cfg):
    from . import cnn, vit

    return (vit if kind == "vit" else cnn).param_shapes(cfg)


def save_checkpoint(model: ModelHandle, path) -> None:
    meta = config_to_meta(model.config)
    meta["label"] = model.label
    names = sorted(model.params)
    write_container(path, model.kind, meta, {n: model.params[n] for n in names})


def load_checkpoint(path) -> ModelHandle:
    kind, meta, tensors = read_container(path)
    if kind not in ("vit", "cnn"):
        raise ConfigError(f"{path} holds a {kind} container, not a model")
    label = meta.pop("label", "")
    cfg = config_from_meta(kind, meta)
    expected = _expected_shapes(kind, cfg)
    if len(tensors) != len(expected):
        raise TensorCountError(
            f"checkpoint has {len(tensors)} tensors, config implies {len(expected)}"
        )
    for name, shape in expected.items():
        if name not in tensors:
            raise ShapeMismatchError(f"tensor {name!r} missing from checkpoint")
        if tensors[name].shape != tuple(shape):
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {tensors[name].shape}, config implies {tuple(shape)}"
            )
    return ModelHandle(kind, cfg, tensors, label)
