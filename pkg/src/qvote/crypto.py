"""XOR ballot encryption, dual-key split and SHA-256 digests.

Bit strings are packed into bytes most-significant-bit first, zero-padded on
the right. XOR cycles the key over the message bits when the key is shorter;
that is a one-time pad only while ``len(key) >= 8 * len(message)``.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .bb84 import BitString, SiftedKey, as_bits, bits_to_str
from .errors import InvalidArgument, InvalidKey, InvalidReceipt, KeyReuseError, KeyTooShort

DIGEST_SIZE = 32


def pack_bits(bits) -> bytes:
    return np.packbits(as_bits(bits)).tobytes()


def unpack_bits(data: bytes, nbits: int | None = None) -> BitString:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    return bits if nbits is None else bits[:nbits]


@dataclass(frozen=True)
class KeyOrigin:
    session_id: str | None = None
    half: str | None = None  # None for a whole QKD key, else "vote" or "id"


@dataclass(eq=False)
class SymmetricKey:
    """Key bits plus a single-use latch for :meth:`encrypt`."""

    bits: BitString
    origin: KeyOrigin = field(default_factory=KeyOrigin)
    _used: bool = field(default=False, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self) -> None:
        self.bits = as_bits(self.bits)
        if len(self.bits) == 0:
            raise InvalidKey("key must hold at least one bit")

    def __len__(self) -> int:
        return len(self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymmetricKey):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    @property
    def used(self) -> bool:
        return self._used

    def encrypt(self, message: bytes) -> bytes:
        with self._lock:
            if self._used:
                raise KeyReuseError(f"key {self.origin} already used for encryption")
            self._used = True
        return xor_apply(message, self)

    def to_str(self) -> str:
        return bits_to_str(self.bits)


def _key_bits(key) -> BitString:
    bits = key.bits if isinstance(key, SymmetricKey) else as_bits(key)
    if len(bits) == 0:
        raise InvalidKey("key must hold at least one bit")
    return bits


def xor_apply(message: bytes, key) -> bytes:
    """XOR ``message`` with ``key`` bits, repeating the key as needed. Self-inverse."""
    bits = _key_bits(key)
    if not message:
        return b""
    n = len(message)
    if len(bits) >= 8 * n:
        stream = np.packbits(bits[: 8 * n]).tobytes()
    else:
        # The repeated key is periodic in whole bytes every lcm(len, 8) bits.
        period = math.lcm(len(bits), 8)
        unit = np.packbits(np.tile(bits, period // len(bits))).tobytes()
        stream = (unit * -(-n // len(unit)))[:n]
    return (int.from_bytes(message, "big") ^ int.from_bytes(stream, "big")).to_bytes(n, "big")


def split_key(
    sifted: SiftedKey | BitString | str,
    vote_key_bits: int,
    id_key_bits: int,
    session_id: str | None = None,
) -> tuple[SymmetricKey, SymmetricKey]:
    """Cut disjoint ``(K_vote, K_id)`` from the front of a sifted key."""
    if vote_key_bits < 1 or id_key_bits < 1:
        raise InvalidArgument("both key lengths must be >= 1")
    bits = sifted.bits if isinstance(sifted, SiftedKey) else as_bits(sifted)
    need = vote_key_bits + id_key_bits
    if len(bits) < need:
        raise KeyTooShort(len(bits), need)
    return (
        SymmetricKey(bits[:vote_key_bits].copy(), KeyOrigin(session_id, "vote")),
        SymmetricKey(bits[vote_key_bits:need].copy(), KeyOrigin(session_id, "id")),
    )


def receipt_hash(e_vote: bytes, e_id: bytes) -> bytes:
    """SHA-256 over ``e_vote || e_id`` with no separator."""
    if not e_vote or not e_id:
        raise InvalidArgument("both ciphertexts must be non-empty")
    return hashlib.sha256(e_vote + e_id).digest()


def key_digest_bits(bits) -> bytes:
    bits = as_bits(bits)
    if len(bits) == 0:
        raise InvalidKey("cannot digest an empty key")
    return hashlib.sha256(np.packbits(bits).tobytes()).digest()


def key_digest(key: SymmetricKey) -> bytes:
    return key_digest_bits(_key_bits(key))


@dataclass(frozen=True)
class Receipt:
    digest: bytes
    session_id: str | None = None

    def __post_init__(self) -> None:
        if len(self.digest) != DIGEST_SIZE:
            raise InvalidReceipt(f"receipt digest must be {DIGEST_SIZE} bytes, got {len(self.digest)}")

    @classmethod
    def from_hex(cls, text: str, session_id: str | None = None) -> Receipt:
        if not isinstance(text, str) or len(text) != 2 * DIGEST_SIZE:
            raise InvalidReceipt(f"receipt must be {2 * DIGEST_SIZE} hex characters")
        try:
            return cls(bytes.fromhex(text), session_id)
        except ValueError:
            raise InvalidReceipt(f"malformed hex receipt {text!r}") from None

    @classmethod
    def of(cls, e_vote: bytes, e_id: bytes, session_id: str | None = None) -> Receipt:
        return cls(receipt_hash(e_vote, e_id), session_id)

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def matches(self, other: Receipt) -> bool:
        return hmac.compare_digest(self.digest, other.digest)
