"""SFCK checkpoint files.

Layout, all little-endian::

    b"SFCK"                 magic
    u16                     format version (1)
    u16                     number of config fields F
    u32 * F                 config fields, in CONFIG_FIELDS order
    u32                     number of parameter tensors P
    P times:
        u16                 name length L
        L bytes             name (ASCII)
        u8                  rank R
        u32 * R             extents
        f32 * prod(extents) values, row-major

Tensors appear in :func:`spectralformer.model.param_shapes` order.  Reals
are always stored at 32-bit precision.  Non-integer config values are
stored scaled: ``dropout_p`` in parts per million and ``ln_eps`` in units
of 1e-9.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import PATCH, PIXEL, ModelConfig, param_shapes

MAGIC = b"SFCK"
VERSION = 1
CONFIG_FIELDS = ("m", "classes", "n", "d", "blocks", "heads", "mlp_hidden", "dropout_ppm",
                 "caf", "input_mode", "patch_side", "readout", "pos", "ln_eps_nano")


def _config_ints(c: ModelConfig) -> list[int]:
    return [c.m, c.classes, c.n, c.d, c.blocks, c.heads, c.mlp_hidden,
            round(c.dropout_p * 1_000_000), int(c.caf), int(c.input_mode == PATCH),
            c.patch_side, int(c.readout == "mean"), int(c.pos == "fixed"),
            round(c.ln_eps * 1e9)]


def _config_from_ints(v: list[int]) -> ModelConfig:
    return ModelConfig(m=v[0], classes=v[1], n=v[2], d=v[3], blocks=v[4], heads=v[5],
                       mlp_hidden=v[6], dropout_p=v[7] / 1_000_000, caf=bool(v[8]),
                       input_mode=PATCH if v[9] else PIXEL, patch_side=v[10],
                       readout="mean" if v[11] else "cls", pos="fixed" if v[12] else "learned",
                       ln_eps=v[13] / 1e9)


def dumps(params, config: ModelConfig) -> bytes:
    ints = _config_ints(config)
    parts = [MAGIC, struct.pack("<HH", VERSION, len(ints)), struct.pack(f"<{len(ints)}I", *ints)]
    names = list(param_shapes(config))
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(params[name])
        raw = name.encode("ascii")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save(path, params, config: ModelConfig) -> None:
    Path(path).write_bytes(dumps(params, config))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"{self.source}: truncated {what} at byte offset {self.pos}: "
                             f"expected {n} bytes, got {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes, source: str = "<checkpoint>", dtype=np.float32):
    r = _Reader(buf, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ParseError(f"{source}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version, nfields = r.unpack("<HH", "header")
    if version != VERSION:
        raise ParseError(f"{source}: unsupported checkpoint version {version} at byte offset 4")
    if nfields != len(CONFIG_FIELDS):
        raise ParseError(f"{source}: expected {len(CONFIG_FIELDS)} config fields, found {nfields}")
    config = _config_from_ints(list(r.unpack(f"<{nfields}I", "config")))
    expected = param_shapes(config)
    (count,) = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise ParseError(f"{source}: {count} tensors stored, config implies {len(expected)}")
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        offset = r.pos
        (length,) = r.unpack("<H", "name length")
        name = r.take(length, "name").decode("ascii")
        (rank,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{rank}I", "extents")
        if expected.get(name) != tuple(shape):
            raise ParseError(f"{source}: tensor {name!r} at byte offset {offset} has shape "
                             f"{tuple(shape)}, expected {expected.get(name)}")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"tensor {name!r}"), dtype="<f4")
        params[name] = data.reshape(shape).astype(dtype)
    if r.pos != len(buf):
        raise ParseError(f"{source}: {len(buf) - r.pos} trailing bytes at byte offset {r.pos}")
    return params, config


def load(path, dtype=np.float32):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(buf, str(path), dtype)
