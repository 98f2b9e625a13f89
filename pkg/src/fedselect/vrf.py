"""Verifiable random function and the sortition threshold.

Two instantiations share one interface:

* strict (default): RSA-FDH-VRF with SHA-256 (the construction of
  RFC 9381 section 5). The proof is the unique RSA-FDH signature on the
  input, the output is a hash of the proof truncated to ``kappa`` bits.
  RSA-FDH signatures are unique once ``gcd(e, lambda(n)) = 1``, which key
  generation enforces; Ed25519-style schemes are avoided because a key
  holder can choose the signing nonce and so produce many valid outputs.
* simulation: SipHash-2-4 keyed by a 16-byte secret. The proof reveals the
  secret so any verifier can recompute the output; outputs become
  predictable once revealed. Only meant for large Monte-Carlo runs, and
  only enabled with ``SecurityParams(strict=False)``.

Keys are tagged by their first byte, so ``vrf_verify`` never needs to be
told which mode produced a proof.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import gmpy2
import numpy as np

from .encoding import H, Reader, lp, truncate_bits, u32, u8, uint
from .siphash import key_words, message_words, message_words_batch, siphash24, siphash24_batch

STRICT_TAG = 0x01
SIM_TAG = 0x02

RSA_SUITE = b"\x01"
RSA_E = 65537
_SIM_PK_TAG = b"fedselect/sim-vrf/pk"
_KEYGEN_TAG = b"fedselect/vrf-keygen"


@dataclass(frozen=True)
class SecurityParams:
    kappa: int = 128
    strict: bool = True
    rsa_bits: int = 2048

    def __post_init__(self):
        if self.kappa % 8:
            raise ValueError("kappa must be a multiple of 8")
        if not 64 <= self.kappa <= 256:
            raise ValueError("kappa must lie in [64, 256]")
        if self.strict and self.kappa < 128:
            raise ValueError("strict mode requires kappa >= 128")
        if self.strict and (self.rsa_bits < 1024 or self.rsa_bits % 16):
            raise ValueError("rsa_bits must be >= 1024 and a multiple of 16")

    @property
    def vrf_output_bits(self) -> int:
        return self.kappa

    @property
    def rnd_bytes(self) -> int:
        return self.kappa // 8


@dataclass(frozen=True)
class KeyPair:
    sk: bytes
    pk: bytes


@dataclass(frozen=True)
class VrfEvaluation:
    output: int
    proof: bytes

    def encode(self, kappa: int) -> bytes:
        return u32(kappa) + uint(self.output, kappa // 8) + lp(self.proof)

    @classmethod
    def decode(cls, data: bytes) -> VrfEvaluation:
        r = Reader(data)
        ev = cls.read(r)
        r.done()
        return ev

    @classmethod
    def read(cls, r: Reader) -> VrfEvaluation:
        kappa = r.u32()
        if kappa % 8 or not 64 <= kappa <= 256:
            raise ValueError("bad output width")
        return cls(r.uint(kappa // 8), r.lp())


def as_fraction(c) -> Fraction:
    """Selection probability as an exact fraction; accepts "m/n" strings."""
    if isinstance(c, Fraction):
        out = c
    elif isinstance(c, float):
        out = Fraction(repr(c))
    else:
        out = Fraction(c)
    if not 0 < out <= 1:
        raise ValueError(f"selection probability must lie in (0, 1], got {c}")
    return out


def threshold(c, kappa: int) -> int:
    """floor(c * 2**kappa) in exact integer arithmetic."""
    c = as_fraction(c)
    return (c.numerator << kappa) // c.denominator


def is_qualified(ev: VrfEvaluation, c, params: SecurityParams) -> bool:
    return ev.output < threshold(c, params.kappa)


# -- key generation ----------------------------------------------------------

def _stream(seed: bytes, label: bytes):
    ctr = 0
    while True:
        yield H(_KEYGEN_TAG, lp(label), lp(seed), u32(ctr))
        ctr += 1


def _draw_prime(blocks, bits: int) -> int:
    nbytes = (bits + 7) // 8
    while True:
        buf = b""
        while len(buf) < nbytes:
            buf += next(blocks)
        cand = int.from_bytes(buf[:nbytes], "big") >> (8 * nbytes - bits)
        cand |= (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits and math.gcd(RSA_E, p - 1) == 1:
            return p


def vrf_gen(params: SecurityParams, seed: bytes) -> KeyPair:
    """Deterministic key pair from ``seed``."""
    if not seed:
        raise ValueError("seed must be nonempty")
    if not params.strict:
        key = H(_KEYGEN_TAG, b"sim", lp(seed))[:16]
        return KeyPair(bytes([SIM_TAG]) + key, _sim_pk(key))
    blocks = _stream(seed, b"rsa%d" % params.rsa_bits)
    half = params.rsa_bits // 2
    while True:
        p = _draw_prime(blocks, half)
        q = _draw_prime(blocks, half)
        if p != q and (p * q).bit_length() == params.rsa_bits:
            break
    p, q = max(p, q), min(p, q)
    n = p * q
    sk = bytes([STRICT_TAG]) + lp(uint(p, half // 8)) + lp(uint(q, half // 8)) + u32(RSA_E)
    pk = bytes([STRICT_TAG]) + lp(uint(n, params.rsa_bits // 8)) + u32(RSA_E)
    return KeyPair(sk, pk)


def public_key(sk: bytes) -> bytes:
    """Recompute the public key from a secret key."""
    if sk[:1] == bytes([SIM_TAG]):
        return _sim_pk(_sim_secret(sk))
    key = _rsa_secret(sk)
    return bytes([STRICT_TAG]) + lp(uint(key.n, key.k)) + u32(key.e)


def _sim_pk(key: bytes) -> bytes:
    return bytes([SIM_TAG]) + H(_SIM_PK_TAG, key)


def _sim_secret(sk: bytes) -> bytes:
    if len(sk) != 17 or sk[0] != SIM_TAG:
        raise ValueError("malformed simulation secret key")
    return sk[1:]


@dataclass(frozen=True)
class _RsaSecret:
    n: int
    e: int
    k: int
    p: int
    q: int
    dp: int
    dq: int
    qinv: int


@functools.lru_cache(maxsize=4096)
def _rsa_secret(sk: bytes) -> _RsaSecret:
    try:
        r = Reader(sk)
        if r.u8() != STRICT_TAG:
            raise ValueError
        p = int.from_bytes(r.lp(), "big")
        q = int.from_bytes(r.lp(), "big")
        e = r.u32()
        r.done()
    except ValueError:
        raise ValueError("malformed RSA secret key") from None
    if p < 3 or q < 3 or p == q or math.gcd(e, (p - 1) * (q - 1)) != 1:
        raise ValueError("malformed RSA secret key")
    n = p * q
    lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
    d = pow(e, -1, lam)
    return _RsaSecret(n, e, (n.bit_length() + 7) // 8, p, q, d % (p - 1), d % (q - 1), pow(q, -1, p))


@functools.lru_cache(maxsize=65536)
def _rsa_public(pk: bytes) -> tuple[int, int, int]:
    r = Reader(pk)
    if r.u8() != STRICT_TAG:
        raise ValueError("not an RSA public key")
    raw = r.lp()
    e = r.u32()
    r.done()
    n = int.from_bytes(raw, "big")
    if n.bit_length() < 1024 or e < 3 or e % 2 == 0:
        raise ValueError("malformed RSA public key")
    return n, e, (n.bit_length() + 7) // 8


def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    ctr = 0
    while len(out) < length:
        out += hashlib.sha256(seed + u32(ctr)).digest()
        ctr += 1
    return bytes(out[:length])


def _fdh(n: int, k: int, data: bytes) -> int:
    salt = u32(k) + uint(n, k)
    return int.from_bytes(_mgf1(RSA_SUITE + b"\x01" + salt + data, k - 1), "big")


def _proof_to_hash(pi: bytes) -> bytes:
    return H(RSA_SUITE, b"\x02", pi)


# -- prove / verify ----------------------------------------------------------

_SIM_MEMO: dict = {}
_SIM_MEMO_MAX = 1 << 17


def remember_sim_output(key: bytes, data: bytes, kappa: int, output: int) -> None:
    """Record an output already computed by the batch kernel (same PRF)."""
    if len(_SIM_MEMO) >= _SIM_MEMO_MAX:
        _SIM_MEMO.clear()
    _SIM_MEMO[key, data, kappa] = output


def _sim_output(key: bytes, data: bytes, kappa: int) -> int:
    memo = _SIM_MEMO.get((key, data, kappa))
    if memo is not None:
        return memo
    out = _sim_output_uncached(key, data, kappa)
    remember_sim_output(key, data, kappa, out)
    return out


def _sim_output_uncached(key: bytes, data: bytes, kappa: int) -> int:
    nblocks = -(-kappa // 64)
    acc = 0
    for i in range(nblocks):
        acc = (acc << 64) | siphash24(key, u8(i) + data)
    return acc >> (64 * nblocks - kappa)


def vrf_prove(sk: bytes, data: bytes, params: SecurityParams) -> VrfEvaluation:
    if not sk:
        raise ValueError("empty secret key")
    if sk[0] == SIM_TAG:
        if params.strict:
            raise ValueError("simulation key used in strict mode")
        key = _sim_secret(sk)
        return VrfEvaluation(_sim_output(key, data, params.kappa), key)
    key = _rsa_secret(sk)
    m = _fdh(key.n, key.k, data)
    s1 = pow(m, key.dp, key.p)
    s2 = pow(m, key.dq, key.q)
    s = s2 + key.q * ((key.qinv * (s1 - s2)) % key.p)
    pi = uint(s, key.k)
    return VrfEvaluation(truncate_bits(_proof_to_hash(pi), params.kappa), pi)


def vrf_verify(pk: bytes, data: bytes, ev: VrfEvaluation, params: SecurityParams) -> bool:
    if not pk or not 0 <= ev.output < (1 << params.kappa):
        return False
    if pk[0] == SIM_TAG:
        if params.strict or len(ev.proof) != 16:
            return False
        return pk == _sim_pk(ev.proof) and ev.output == _sim_output(ev.proof, data, params.kappa)
    if pk[0] != STRICT_TAG:
        return False
    try:
        n, e, k = _rsa_public(pk)
    except ValueError:
        return False
    if len(ev.proof) != k:
        return False
    s = int.from_bytes(ev.proof, "big")
    if s >= n or pow(s, e, n) != _fdh(n, k, data):
        return False
    return ev.output == truncate_bits(_proof_to_hash(ev.proof), params.kappa)


# -- batch evaluation (simulation mode) --------------------------------------

@dataclass(frozen=True)
class SimKeyArray:
    """SipHash keys of many simulation-mode secret keys, as numpy arrays."""

    k0: np.ndarray
    k1: np.ndarray

    @classmethod
    def from_secret_keys(cls, sks: Iterable[bytes]) -> SimKeyArray:
        words = [key_words(_sim_secret(sk)) for sk in sks]
        arr = np.array(words, dtype=np.uint64).reshape(-1, 2)
        return cls(arr[:, 0].copy(), arr[:, 1].copy())

    def __len__(self):
        return len(self.k0)

    def take(self, idx) -> SimKeyArray:
        return SimKeyArray(self.k0[idx], self.k1[idx])


def sim_outputs(keys: SimKeyArray, inputs, kappa: int = 64, key_axis_last: bool = True) -> np.ndarray:
    """Simulation-mode VRF outputs for every key against ``inputs``.

    ``inputs`` is either one ``bytes`` value shared by every key, or a uint8
    array of shape ``(..., L)`` of equal-length inputs. With
    ``key_axis_last`` the result has shape ``inputs.shape[:-1] + (n_keys,)``.
    Only ``kappa == 64`` is vectorised; wider outputs fall back to Python.
    """
    if kappa != 64:
        raise ValueError("vectorised simulation outputs need kappa == 64")
    if isinstance(inputs, (bytes, bytearray)):
        words: list = message_words(b"\x00" + bytes(inputs))
        words = [np.uint64(w) for w in words]
        return siphash24_batch(keys.k0, keys.k1, words)
    arr = np.asarray(inputs, dtype=np.uint8)
    prefixed = np.concatenate([np.zeros(arr.shape[:-1] + (1,), dtype=np.uint8), arr], axis=-1)
    words = message_words_batch(prefixed)
    if key_axis_last:
        words = [w[..., None] for w in words]
        return siphash24_batch(keys.k0, keys.k1, words)
    return siphash24_batch(keys.k0, keys.k1, words)


def qualified_mask(outputs: np.ndarray, c, kappa: int = 64) -> np.ndarray:
    """Vectorised ``is_qualified`` over uint64 outputs."""
    thr = threshold(c, kappa)
    if thr >= 1 << 64:
        return np.ones(np.shape(outputs), dtype=bool)
    return outputs < np.uint64(thr)


def prove_outputs(sks: Sequence[bytes], data: bytes, params: SecurityParams) -> list[int]:
    """VRF outputs of many keys on one input; vectorised in simulation mode."""
    if not params.strict and params.kappa == 64 and sks:
        return [int(x) for x in sim_outputs(SimKeyArray.from_secret_keys(sks), data)]
    return [vrf_prove(sk, data, params).output for sk in sks]
