"""Single-file keyed store of FeatureTriples.

Byte layout (all integers little-endian)::

    file   := b"CFFS" u16 version entry*
    entry  := u16 key_len key_utf8
              u8 label u8 split_code          # split: 0 train, 1 val, 2 test, 255 none
              u32 chunk_index
              u32 H u32 W u32 C  u32 n_bytes  float32[H*W*C]   (row-major heatmap)
              u32 n_bytes float64[13]                          (mfcc)
              u32 n_bytes u8[n_bits]                           (clinical bits, one byte each)

The manifest ``<store>.keys`` lists ``key<TAB>offset`` per line in write order.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from pathlib import Path
from typing import Iterator

import numpy as np

from .features import FeatureTriple

MAGIC = b"CFFS"
VERSION = 1
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2, None: 255}
_SPLIT_NAMES = {v: k for k, v in _SPLIT_CODES.items()}


class KeyConflictError(KeyError):
    pass


class KeyNotFoundError(KeyError):
    pass


def encode_entry(t: FeatureTriple) -> bytes:
    key = t.key.encode()
    heat = np.ascontiguousarray(t.heatmap, dtype="<f4")
    mf = np.ascontiguousarray(t.mfcc, dtype="<f8")
    clin = bytes(int(b) for b in t.clinical)
    parts = [
        struct.pack("<H", len(key)), key,
        struct.pack("<BBI", t.label, _SPLIT_CODES[t.split], t.chunk_index),
        struct.pack("<IIII", *heat.shape, heat.nbytes), heat.tobytes(),
        struct.pack("<I", mf.nbytes), mf.tobytes(),
        struct.pack("<I", len(clin)), clin,
    ]
    return b"".join(parts)


def decode_entry(buf: bytes, pos: int = 0) -> tuple[FeatureTriple, int]:
    (klen,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    key = buf[pos:pos + klen].decode()
    pos += klen
    label, split_code, chunk_index = struct.unpack_from("<BBI", buf, pos)
    pos += 6
    h, w, c, nbytes = struct.unpack_from("<IIII", buf, pos)
    pos += 16
    heat = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=pos).reshape(h, w, c).astype(np.float32)
    pos += nbytes
    (nbytes,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    mf = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64)
    pos += nbytes
    (nbits,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    clin = tuple(buf[pos:pos + nbits])
    pos += nbits
    record_id = key.rsplit("#", 1)[0]
    return FeatureTriple(record_id, chunk_index, heat, mf, clin, label, _SPLIT_NAMES[split_code]), pos


class FeatureStore:
    """Append-only keyed container; safe for concurrent ``put`` from threads.

    A duplicate key is rejected (the first writer wins).
    """

    def __init__(self, path: str | Path, mode: str = "r"):
        self.path = Path(path)
        self.manifest_path = self.path.with_name(self.path.name + ".keys")
        self._lock = threading.Lock()
        self._offsets: dict[str, int] = {}
        if mode == "w":
            self.path.write_bytes(MAGIC + struct.pack("<H", VERSION))
            self.manifest_path.write_text("")
        elif mode in ("r", "a"):
            self._load_index()
        else:
            raise ValueError(f"mode must be 'r', 'w' or 'a', got {mode!r}")
        self.mode = mode

    def _load_index(self) -> None:
        head = self.path.read_bytes()[:6]
        if head[:4] != MAGIC:
            raise ValueError(f"{self.path} is not a feature store")
        if self.manifest_path.exists():
            for line in self.manifest_path.read_text().splitlines():
                key, off = line.split("\t")
                self._offsets[key] = int(off)
        else:
            buf = self.path.read_bytes()
            pos = 6
            while pos < len(buf):
                t, nxt = decode_entry(buf, pos)
                self._offsets[t.key] = pos
                pos = nxt

    def put(self, triple: FeatureTriple) -> None:
        if self.mode == "r":
            raise PermissionError("store opened read-only")
        blob = encode_entry(triple)
        with self._lock:
            if triple.key in self._offsets:
                raise KeyConflictError(f"key {triple.key} already stored")
            with open(self.path, "ab") as fh:
                offset = fh.tell()
                fh.write(blob)
            with open(self.manifest_path, "a") as fh:
                fh.write(f"{triple.key}\t{offset}\n")
            self._offsets[triple.key] = offset

    def get(self, key: str) -> FeatureTriple:
        try:
            offset = self._offsets[key]
        except KeyError:
            raise KeyNotFoundError(f"key {key} not in store") from None
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            head = fh.read(2)
            (klen,) = struct.unpack("<H", head)
            rest = fh.read(klen + 6 + 16)
            h, w, c, hbytes = struct.unpack_from("<IIII", rest, klen + 6)
            body = fh.read(hbytes + 4)
            (mbytes,) = struct.unpack_from("<I", body, hbytes)
            tail = fh.read(mbytes + 4)
            (nbits,) = struct.unpack_from("<I", tail, mbytes)
            clin = fh.read(nbits)
        return decode_entry(head + rest + body + tail + clin)[0]

    def keys(self) -> list[str]:
        return list(self._offsets)

    def __contains__(self, key: str) -> bool:
        return key in self._offsets

    def __len__(self) -> int:
        return len(self._offsets)

    def __iter__(self) -> Iterator[FeatureTriple]:
        buf = self.path.read_bytes()
        for key in self._offsets:
            yield decode_entry(buf, self._offsets[key])[0]

    def load_all(self) -> dict[str, FeatureTriple]:
        return {t.key: t for t in self}

    def digest(self) -> str:
        """Write-order independent content hash: sha256 over entries sorted by key."""
        buf = self.path.read_bytes()
        h = hashlib.sha256()
        for key in sorted(self._offsets):
            t, _ = decode_entry(buf, self._offsets[key])
            h.update(encode_entry(t))
        return h.hexdigest()
