"""Binary checkpoints (``.cdbk``).

Layout, all little-endian::

    b"CDBK"  u16 version
    u32 len  topology descriptor (utf-8, as produced by Network.describe)
    u32 number of params
    per param: u16 len + name, u32 rank, rank * u32 dims,
               float64 values, float64 momentum
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError
from .layers import Network, build_network

MAGIC = b"CDBK"
VERSION = 1
_F64 = np.dtype("<f8")


def save_checkpoint(net: Network, path) -> None:
    out = [MAGIC, struct.pack("<H", VERSION)]
    desc = net.describe().encode()
    out.append(struct.pack("<I", len(desc)) + desc)
    params = net.params()
    out.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        out.append(struct.pack("<H", len(name)) + name)
        out.append(struct.pack(f"<I{p.values.ndim}I", p.values.ndim, *p.values.shape))
        out.append(p.values.astype(_F64).tobytes())
        out.append(p.momentum.astype(_F64).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[str, list]:
    """Return ``(descriptor, [(name, values, momentum), ...])``."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a CDBK checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        desc = r.take(n).decode()
    except UnicodeDecodeError:
        raise FormatError(f"{path}: corrupt topology descriptor") from None
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode(errors="replace")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) * 8
        values = np.frombuffer(r.take(size), dtype=_F64).reshape(dims).astype(np.float64)
        momentum = np.frombuffer(r.take(size), dtype=_F64).reshape(dims).astype(np.float64)
        entries.append((name, values, momentum))
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return desc, entries


def load_checkpoint(path, net: Network | None = None) -> Network:
    """Load a checkpoint, into ``net`` if given (topology must match)."""
    desc, entries = read_checkpoint(path)
    if net is None:
        net = build_network(desc)
    elif net.describe() != desc:
        raise FormatError(f"{path}: topology {desc!r} does not match network {net.describe()!r}")
    params = net.params()
    if len(params) != len(entries):
        raise FormatError(f"{path}: {len(entries)} params stored, network has {len(params)}")
    for p, (name, values, momentum) in zip(params, entries):
        if p.name != name or p.values.shape != values.shape:
            raise FormatError(
                f"{path}: param {name} {values.shape} does not match {p.name} {p.values.shape}"
            )
    for p, (_, values, momentum) in zip(params, entries):
        p.values[...] = values
        p.momentum[...] = momentum
        p.grad[...] = 0.0
        p.update_mask = None
    return net
