"""Binary checkpoint files.

Layout (little-endian)::

    b"UIQA" | version u16 | fusion-kind tag u8 | class count u16
    then until end of file: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import FUSION_KINDS, TinyBackbone, UnpairedIqaModel


MAGIC = b"UIQA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(named, fusion_kind, n_classes):
    parts = [MAGIC, struct.pack("<HBH", VERSION, FUSION_KINDS.index(fusion_kind), n_classes)]
    for name, arr in named:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf):
    """Return (fusion_kind, n_classes, [(name, float32 array), ...])."""
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not a UIQA checkpoint")
    version, tag, n_classes = struct.unpack_from("<HBH", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if tag >= len(FUSION_KINDS):
        raise CheckpointError(f"unknown fusion tag {tag}")
    off = 4 + struct.calcsize("<HBH")
    named = []
    while off < len(buf):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        if off + 4 * size > len(buf):
            raise CheckpointError(f"tensor {name!r} truncated")
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
        named.append((name, arr))
    return FUSION_KINDS[tag], n_classes, named


def model_bytes(model):
    named = [(n, p.data) for n, p in model.named_parameters()]
    return encode_tensors(named, model.fusion_kind, model.n_classes)


def save_model(model, path):
    Path(path).write_bytes(model_bytes(model))


def load_model(path, dtype=np.float32):
    kind, n_classes, named = decode_tensors(Path(path).read_bytes())
    has_backbone = any(n.startswith("backbone.") for n, _ in named)
    backbone = TinyBackbone.init(np.random.default_rng(0), dtype) if has_backbone else None
    model = UnpairedIqaModel.create(kind, n_classes, seed=0, dtype=dtype, backbone=backbone)
    assign(model.named_parameters(), named)
    return model


def assign(targets, named):
    """Copy arrays into parameter tensors by name; every target must be supplied."""
    lookup = dict(named)
    for name, p in targets:
        if name not in lookup:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        arr = lookup[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != model {p.shape}")
        p.data = arr.astype(p.data.dtype)
        if p.requires_grad:
            p.grad = np.zeros_like(p.data)


def save_tensors(path, named, fusion_kind="none", n_classes=0):
    """Write arbitrary named arrays (used for feature dumps) in the same format."""
    Path(path).write_bytes(encode_tensors(named, fusion_kind, n_classes))


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())[2]


def backbone_bytes(backbone):
    return encode_tensors([(n, p.data) for n, p in backbone.params("backbone")], "none", 10)


def load_backbone(path, dtype=np.float32):
    return backbone_from_bytes(Path(path).read_bytes(), dtype)


def backbone_from_bytes(buf, dtype=np.float32):
    _, _, named = decode_tensors(buf)
    bb = TinyBackbone.init(np.random.default_rng(0), dtype)
    assign(bb.params("backbone"), named)
    return bb


