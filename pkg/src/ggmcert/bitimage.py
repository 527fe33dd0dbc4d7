"""Binary images with exact equality, Boolean algebra and a pixel-count norm."""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np


class BitImage:
    """Immutable H x W binary image.

    Pixel (px, py) in the 1-based convention of the rasterizer is stored at
    ``bits[py - 1, px - 1]``.
    """

    __slots__ = ("_bits", "_hash")

    def __init__(self, bits):
        a = np.array(bits, dtype=bool, copy=True)
        if a.ndim != 2:
            raise ValueError("BitImage expects a 2-D array")
        a.flags.writeable = False
        self._bits = a
        self._hash = None

    @classmethod
    def zeros(cls, width: int, height: int) -> "BitImage":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def ones(cls, width: int, height: int) -> "BitImage":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "BitImage":
        obj = cls.__new__(cls)
        a.flags.writeable = False
        obj._bits = a
        obj._hash = None
        return obj

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._bits.shape

    def pixel(self, px: int, py: int) -> int:
        return int(self._bits[py - 1, px - 1])

    def count(self) -> int:
        return int(np.count_nonzero(self._bits))

    def packed(self) -> bytes:
        """Row-major bits, most significant bit first, no row padding."""
        return np.packbits(self._bits.ravel()).tobytes()

    def digest(self) -> bytes:
        return hashlib.blake2b(self.packed(), digest_size=16).digest()

    def _check(self, other: "BitImage"):
        if self.shape != other.shape:
            raise ValueError(f"image dimensions differ: {self.shape} vs {other.shape}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitImage):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._bits, other._bits)

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self.shape, self.digest()))
        return self._hash

    def __or__(self, other: "BitImage") -> "BitImage":
        self._check(other)
        return BitImage._wrap(self._bits | other._bits)

    def __and__(self, other: "BitImage") -> "BitImage":
        self._check(other)
        return BitImage._wrap(self._bits & other._bits)

    def __xor__(self, other: "BitImage") -> "BitImage":
        self._check(other)
        return BitImage._wrap(self._bits ^ other._bits)

    def __invert__(self) -> "BitImage":
        return BitImage._wrap(~self._bits)

    hadamard = __and__

    def distance(self, other: "BitImage") -> float:
        """sqrt of the number of differing pixels."""
        self._check(other)
        return math.sqrt(int(np.count_nonzero(self._bits ^ other._bits)))

    def norm(self) -> float:
        return math.sqrt(self.count())

    def __repr__(self) -> str:
        return f"BitImage({self.width}x{self.height}, {self.count()} set)"

    # -- serialization -----------------------------------------------------

    def to_raw(self) -> bytes:
        """8-byte little-endian header (width, height) followed by packed bits."""
        return struct.pack("<II", self.width, self.height) + self.packed()

    @classmethod
    def from_raw(cls, data: bytes) -> "BitImage":
        w, h = struct.unpack_from("<II", data, 0)
        nbytes = (w * h + 7) // 8
        payload = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=8)
        bits = np.unpackbits(payload)[: w * h].astype(bool).reshape(h, w)
        return cls._wrap(bits)

    @staticmethod
    def raw_size(width: int, height: int) -> int:
        return 8 + (width * height + 7) // 8

    def to_pbm(self) -> bytes:
        """Binary PBM (P4); a set bit is written as 1 (black)."""
        rows = np.packbits(self._bits, axis=1)
        return f"P4\n{self.width} {self.height}\n".encode("ascii") + rows.tobytes()

    @classmethod
    def from_pbm(cls, data: bytes) -> "BitImage":
        fields: list[bytes] = []
        pos = 0
        while len(fields) < 3:
            while data[pos : pos + 1].isspace():
                pos += 1
            if data[pos : pos + 1] == b"#":
                while data[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
                continue
            start = pos
            while not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        if fields[0] != b"P4":
            raise ValueError("not a binary PBM (P4) file")
        w, h = int(fields[1]), int(fields[2])
        pos += 1  # single whitespace after the header
        row_bytes = (w + 7) // 8
        rows = np.frombuffer(data, dtype=np.uint8, count=row_bytes * h, offset=pos).reshape(h, row_bytes)
        bits = np.unpackbits(rows, axis=1)[:, :w].astype(bool)
        return cls._wrap(bits)


def pack_batch(images: np.ndarray) -> np.ndarray:
    """(N, H, W) bool -> (N, words) uint64 with zero padding, for fast distances."""
    n = images.shape[0]
    flat = images.reshape(n, -1)
    packed = np.packbits(flat, axis=1)
    pad = (-packed.shape[1]) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros((n, pad), dtype=np.uint8)], axis=1)
    return np.ascontiguousarray(packed).view(np.uint64)


def hamming(packed_set: np.ndarray, packed_one: np.ndarray) -> np.ndarray:
    """Number of differing pixels between each row of a packed set and one image."""
    return np.bitwise_count(packed_set ^ packed_one[None, :]).sum(axis=1, dtype=np.int64)
