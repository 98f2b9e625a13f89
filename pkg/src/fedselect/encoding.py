"""Canonical binary encoding and the hash function used everywhere.

Integers are big-endian, variable-length fields carry a 4-byte length
prefix. Anything that is hashed or stored on chain goes through here so
transaction ids are stable across runs and platforms.
"""

from __future__ import annotations

import hashlib

HASH_NAME = "sha256"
DIGEST_SIZE = 32


def H(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


def u8(x: int) -> bytes:
    return x.to_bytes(1, "big")


def u32(x: int) -> bytes:
    return x.to_bytes(4, "big")


def u64(x: int) -> bytes:
    return x.to_bytes(8, "big")


def uint(x: int, nbytes: int) -> bytes:
    return x.to_bytes(nbytes, "big")


def lp(b: bytes) -> bytes:
    """Length-prefixed field."""
    return u32(len(b)) + b


def truncate_bits(digest: bytes, bits: int) -> int:
    """Leading ``bits`` bits of ``digest`` as an unsigned integer."""
    if bits > 8 * len(digest):
        raise ValueError(f"cannot take {bits} bits from a {len(digest)}-byte digest")
    return int.from_bytes(digest, "big") >> (8 * len(digest) - bits)


class DecodeError(ValueError):
    pass


class Reader:
    """Cursor over a canonical encoding."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError("truncated input")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def uint(self, nbytes: int) -> int:
        return int.from_bytes(self.take(nbytes), "big")

    def lp(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes")
