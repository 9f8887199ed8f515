"""Binary persistence for network weights and position datasets.

Both formats are little-endian; see ``docs/formats.md`` for the byte layout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import Network, build_from_descriptor
from .training import SfsDataset, SslDataset

WEIGHTS_MAGIC = b"WSPW"
DATASET_MAGIC = b"WSPD"
FORMAT_VERSION = 1
_KIND_CODES = {"ssl": 1, "sfs": 2}


class FormatError(ValueError):
    """Unreadable file: wrong magic, truncated payload, or inconsistent header."""


class VersionMismatchError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def finish(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("B")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{r.path}: format version {version}, this reader supports {FORMAT_VERSION}")


def weights_to_bytes(net: Network) -> bytes:
    desc = json.dumps(net.descriptor, sort_keys=True).encode()
    arrays = net.named_arrays()
    out = [WEIGHTS_MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<I", len(desc)), desc,
           struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        b = name.encode()
        out += [struct.pack("<H", len(b)), b, struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def weights_from_bytes(data: bytes, path="<bytes>") -> Network:
    r = _Reader(data, path)
    _header(r, WEIGHTS_MAGIC)
    (n,) = r.unpack("I")
    try:
        desc = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable architecture descriptor ({exc})") from None
    (count,) = r.unpack("I")
    arrays = []
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        arrays.append((name, r.floats(int(np.prod(shape))).reshape(shape)))
    r.finish()
    try:
        net = build_from_descriptor(desc)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: cannot rebuild architecture ({exc})") from None
    try:
        net.load_arrays(arrays)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return net


def save_weights(path: str | Path, net: Network) -> None:
    Path(path).write_bytes(weights_to_bytes(net))


def load_weights(path: str | Path) -> Network:
    return weights_from_bytes(Path(path).read_bytes(), path)


def save_dataset(path: str | Path, ds: SslDataset | SfsDataset) -> None:
    kind = "ssl" if isinstance(ds, SslDataset) else "sfs"
    payload = ds.positions if kind == "ssl" else ds.pairs.reshape(-1, 6)
    head = struct.pack("<4sBBdQIIB", DATASET_MAGIC, FORMAT_VERSION, _KIND_CODES[kind], float(ds.frequency),
                       int(ds.seed), len(payload), int(ds.n_train), payload.shape[1])
    Path(path).write_bytes(head + np.ascontiguousarray(payload, dtype="<f8").tobytes())


def load_dataset(path: str | Path) -> SslDataset | SfsDataset:
    r = _Reader(Path(path).read_bytes(), path)
    _header(r, DATASET_MAGIC)
    kind, freq, seed, n, n_train, width = r.unpack("BdQIIB")
    expected = {1: 3, 2: 6}.get(kind)
    if expected is None:
        raise FormatError(f"{path}: unknown dataset kind {kind}")
    if width != expected or n_train > n:
        raise FormatError(f"{path}: inconsistent header (width {width}, {n_train} of {n} training rows)")
    payload = r.floats(n * width).reshape(n, width)
    r.finish()
    if kind == 1:
        return SslDataset(payload, n_train, freq, seed)
    return SfsDataset(payload.reshape(n, 2, 3), n_train, freq, seed)
