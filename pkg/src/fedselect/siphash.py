"""SipHash-2-4 keyed PRF: a scalar version and a numpy-vectorised one.

The vectorised form lets Monte-Carlo runs evaluate thousands of
simulation-mode VRF outputs per numpy call. Both versions must agree bit
for bit; the tests cross-check them against the published test vectors.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_C0 = 0x736F6D6570736575
_C1 = 0x646F72616E646F6D
_C2 = 0x6C7967656E657261
_C3 = 0x7465646279746573


def key_words(key: bytes) -> tuple[int, int]:
    if len(key) != 16:
        raise ValueError("SipHash key must be 16 bytes")
    return int.from_bytes(key[:8], "little"), int.from_bytes(key[8:], "little")


def message_words(msg: bytes) -> list[int]:
    """Split ``msg`` into little-endian words, final word carrying the length byte."""
    n_full = len(msg) // 8
    words = [int.from_bytes(msg[8 * i:8 * i + 8], "little") for i in range(n_full)]
    tail = int.from_bytes(msg[8 * n_full:], "little")
    words.append(tail | ((len(msg) & 0xFF) << 56))
    return words


def _rotl(x: int, b: int) -> int:
    return ((x << b) | (x >> (64 - b))) & _MASK


def siphash24(key: bytes, msg: bytes) -> int:
    k0, k1 = key_words(key)
    v0, v1, v2, v3 = k0 ^ _C0, k1 ^ _C1, k0 ^ _C2, k1 ^ _C3

    def rounds(n, v0, v1, v2, v3):
        for _ in range(n):
            v0 = (v0 + v1) & _MASK
            v1 = _rotl(v1, 13) ^ v0
            v0 = _rotl(v0, 32)
            v2 = (v2 + v3) & _MASK
            v3 = _rotl(v3, 16) ^ v2
            v0 = (v0 + v3) & _MASK
            v3 = _rotl(v3, 21) ^ v0
            v2 = (v2 + v1) & _MASK
            v1 = _rotl(v1, 17) ^ v2
            v2 = _rotl(v2, 32)
        return v0, v1, v2, v3

    for m in message_words(msg):
        v3 ^= m
        v0, v1, v2, v3 = rounds(2, v0, v1, v2, v3)
        v0 ^= m
    v2 ^= 0xFF
    v0, v1, v2, v3 = rounds(4, v0, v1, v2, v3)
    return v0 ^ v1 ^ v2 ^ v3


def message_words_batch(msgs: np.ndarray) -> list[np.ndarray]:
    """Word arrays for a batch of equal-length messages given as uint8 rows."""
    msgs = np.ascontiguousarray(msgs, dtype=np.uint8)
    length = msgs.shape[-1]
    n_full = length // 8
    words = []
    for i in range(n_full):
        words.append(msgs[..., 8 * i:8 * i + 8].copy().view("<u8")[..., 0].astype(np.uint64))
    tail = np.zeros(msgs.shape[:-1] + (8,), dtype=np.uint8)
    rem = length - 8 * n_full
    tail[..., :rem] = msgs[..., 8 * n_full:]
    tail[..., 7] = length & 0xFF
    words.append(tail.view("<u8")[..., 0].astype(np.uint64))
    return words


_R = {b: (np.uint64(b), np.uint64(64 - b)) for b in (13, 16, 17, 21, 32)}


def _nrotl(x: np.ndarray, b: int, tmp: np.ndarray) -> None:
    """In-place 64-bit rotate left, using ``tmp`` as scratch."""
    left, right = _R[b]
    np.right_shift(x, right, out=tmp)
    np.left_shift(x, left, out=x)
    x |= tmp


def siphash24_batch(k0: np.ndarray, k1: np.ndarray, words: Sequence[np.ndarray | int]) -> np.ndarray:
    """Vectorised SipHash-2-4.

    ``k0``/``k1`` and each entry of ``words`` broadcast against each other;
    words come from :func:`message_words` or :func:`message_words_batch`.
    """
    k0 = np.asarray(k0, dtype=np.uint64)
    k1 = np.asarray(k1, dtype=np.uint64)
    shape = np.broadcast_shapes(k0.shape, k1.shape, *(np.shape(w) for w in words))
    v0 = np.empty(shape, dtype=np.uint64)
    v1 = np.empty(shape, dtype=np.uint64)
    v2 = np.empty(shape, dtype=np.uint64)
    v3 = np.empty(shape, dtype=np.uint64)
    v0[...] = k0 ^ np.uint64(_C0)
    v1[...] = k1 ^ np.uint64(_C1)
    v2[...] = k0 ^ np.uint64(_C2)
    v3[...] = k1 ^ np.uint64(_C3)
    tmp = np.empty(shape, dtype=np.uint64)

    def rnd():
        nonlocal v0, v1, v2, v3
        v0 += v1
        _nrotl(v1, 13, tmp)
        v1 ^= v0
        _nrotl(v0, 32, tmp)
        v2 += v3
        _nrotl(v3, 16, tmp)
        v3 ^= v2
        v0 += v3
        _nrotl(v3, 21, tmp)
        v3 ^= v0
        v2 += v1
        _nrotl(v1, 17, tmp)
        v1 ^= v2
        _nrotl(v2, 32, tmp)

    for m in words:
        m = np.asarray(m, dtype=np.uint64)
        v3 ^= m
        rnd()
        rnd()
        v0 ^= m
    v2 ^= np.uint64(0xFF)
    for _ in range(4):
        rnd()
    v0 ^= v1
    v0 ^= v2
    v0 ^= v3
    return v0
