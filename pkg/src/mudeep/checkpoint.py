"""Binary checkpoint container.

Layout (little-endian)::

    b"MUDP"  u32 version  u32 len + UTF-8 config text  u32 blob count
    per blob: u32 len + UTF-8 name, u8 dtype tag, u8 ndim, ndim * u32 dims, payload

Blob names are prefixed ``param:``, ``buffer:`` or ``meta:``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .layers import init_parameters
from .model import MuDeep

MAGIC = b"MUDP"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype(v).str: k for k, v in _TAGS.items()}


@dataclass
class Checkpoint:
    config_text: str
    blobs: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def iteration(self) -> int:
        it = self.blobs.get("meta:iteration")
        return 0 if it is None else int(it[0])

    @property
    def mean(self) -> np.ndarray | None:
        return self.blobs.get("meta:mean")

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.blobs.items() if k.startswith(prefix + ":")}


def model_blobs(model: MuDeep, iteration: int = 0, mean=None,
                velocity: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    for name, p in model.registry.params.items():
        blobs["param:" + name] = p.data
    for name, b in model.registry.buffers.items():
        blobs["buffer:" + name] = b
    for name, v in (velocity or {}).items():
        blobs["velocity:" + name] = v
    blobs["meta:iteration"] = np.array([iteration], dtype=np.int64)
    if mean is not None:
        blobs["meta:mean"] = np.asarray(mean, dtype=np.float64)
    return blobs


def _u32(fh_bytes: bytearray, v: int) -> None:
    fh_bytes += struct.pack("<I", v)


def _string(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    _u32(out, len(raw))
    out += raw


def encode(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    _u32(out, ckpt.version)
    _string(out, ckpt.config_text)
    _u32(out, len(ckpt.blobs))
    for name, arr in ckpt.blobs.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        tag = _TAG_OF.get(le.str)
        if tag is None:
            raise CheckpointError(f"blob {name!r}: unsupported dtype {arr.dtype}")
        _string(out, name)
        out += struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated or corrupt checkpoint while reading {what}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{self.source}: corrupt {what} (invalid UTF-8)") from None


def decode(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (this build reads {VERSION})")
    config_text = r.string("config")
    count = r.u32("blob count")
    blobs = {}
    for i in range(count):
        name = r.string(f"blob {i} name")
        tag, ndim = struct.unpack("<BB", r.take(2, f"blob {name!r} header"))
        if tag not in _TAGS:
            raise CheckpointError(f"{source}: blob {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"blob {name!r} dims"))
        dt = _TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        blobs[name] = np.frombuffer(r.take(n, f"blob {name!r} payload"), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes after the last blob")
    return Checkpoint(config_text, blobs, version)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))


def load_into_model(model: MuDeep, ckpt: Checkpoint, reinit_classifier: bool = False,
                    seed: int = 0) -> None:
    """Copy parameters and batch-norm buffers into ``model``.

    With ``reinit_classifier`` the classifier is freshly initialized from
    ``seed`` (its width may differ from the stored one); every other
    parameter must match by name and shape.
    """
    params = ckpt.section("param")
    buffers = ckpt.section("buffer")
    cls_names = {p.name for p in model.classifier_parameters()}
    expected = {n for n in model.registry.params if not (reinit_classifier and n in cls_names)}
    stored = {n for n in params if not (reinit_classifier and n.startswith("classifier"))}
    missing, extra = sorted(expected - stored), sorted(stored - expected)
    mismatched = sorted(n for n in expected & stored if tuple(params[n].shape) != model.registry.params[n].shape)
    mismatched += sorted(n for n in buffers if n in model.registry.buffers
                         and buffers[n].shape != model.registry.buffers[n].shape)
    if missing or extra or mismatched:
        parts = []
        if missing:
            parts.append(f"missing {missing}")
        if extra:
            parts.append(f"unexpected {extra}")
        if mismatched:
            parts.append(f"shape mismatch {mismatched}")
        raise CheckpointError("checkpoint does not fit the model: " + "; ".join(parts))
    for n in expected:
        p = model.registry.params[n]
        p.assign(params[n].astype(p.data.dtype if p.data is not None else params[n].dtype, copy=True))
    for n, b in buffers.items():
        if n in model.registry.buffers:
            model.registry.buffers[n][...] = b
    if reinit_classifier and cls_names:
        init_parameters(model.registry, seed, names=sorted(cls_names))
