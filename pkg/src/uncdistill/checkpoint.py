"""Model checkpoint file format.

Layout (all integers little-endian):

    magic   4 bytes  "DUDE"
    version u32      currently 1
    config  u32 num_classes, 3x u32 encoder widths, u32 decoder width,
            u32 kernel size, u32 input size, u8 dual_head flag
    count   u32      number of tensor records
    record  u32 name length, name bytes (utf-8), u8 group tag
            (0 backbone, 1 decoder), 4x u32 extents, f32 payload

Round trips are bit-exact (parameters are float32 in memory). Any structural
fault raises CheckpointError with the byte offset where parsing stopped.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor
from .model import BACKBONE, DECODER, ModelConfig, ModelParams

MAGIC = b"DUDE"
VERSION = 1

_GROUP_TO_TAG = {BACKBONE: 0, DECODER: 1}
_TAG_TO_GROUP = {0: BACKBONE, 1: DECODER}


class CheckpointError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


def save_checkpoint(params: ModelParams, path) -> None:
    cfg = params.config
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(struct.pack(
        "<7IB", cfg.num_classes, *cfg.encoder_widths, cfg.decoder_width,
        cfg.kernel_size, cfg.input_size, 1 if params.dual_head else 0))
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.tensors.items():
        data = np.ascontiguousarray(tensor.data, dtype=np.float32)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", _GROUP_TO_TAG[params.groups[name]]))
        chunks.append(struct.pack("<4I", *data.shape))
        if np.little_endian:
            chunks.append(data.tobytes())
        else:
            chunks.append(data.byteswap().tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, path, blob: bytes):
        self.path = path
        self.blob = blob
        self.pos = 0

    def fail(self, message: str):
        raise CheckpointError(self.path, self.pos, message)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            self.fail(f"truncated file while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(path, blob)
    if r.take(4, "magic") != MAGIC:
        r.pos = 0
        r.fail(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        r.fail(f"version mismatch: file has {version}, reader supports {VERSION}")
    c, w1, w2, w3, d, k, insize, dual = r.unpack("<7IB", "config block")
    config = ModelConfig(num_classes=c, encoder_widths=(w1, w2, w3),
                         decoder_width=d, kernel_size=k, input_size=insize)
    params = ModelParams(config=config, dual_head=bool(dual))
    (count,) = r.unpack("<I", "tensor count")
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (tag,) = r.unpack("<B", f"group tag of {name!r}")
        if tag not in _TAG_TO_GROUP:
            r.fail(f"unknown group tag {tag} for tensor {name!r}")
        extents = r.unpack("<4I", f"extents of {name!r}")
        n = int(np.prod(extents))
        payload = r.take(4 * n, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(extents)
        params.tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        params.groups[name] = _TAG_TO_GROUP[tag]
    if r.pos != len(blob):
        r.fail(f"trailing {len(blob) - r.pos} bytes after last tensor record")
    if params.dual_head != ("unc_head.w" in params.tensors):
        r.fail("dual_head flag disagrees with stored tensors")
    return params
