"""Hashing, unambiguous concatenation, XOR masking and authenticated encryption."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .errors import NonceReuseError, TamperError

DIGEST_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
ZERO_DIGEST = bytes(DIGEST_SIZE)

def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


def hexdigest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _as_bytes(part) -> bytes:
    if isinstance(part, str):
        return part.encode("utf-8")
    if isinstance(part, int):
        return part.to_bytes(8, "big", signed=True)
    return bytes(part)


def concat(parts: Iterable) -> bytes:
    """Length-prefixed concatenation.

    Layout: 4-byte part count, then for each part a 4-byte length and the
    part bytes. ``str`` parts are UTF-8 encoded and ``int`` parts become
    8-byte signed big-endian, so callers can mix field types freely.
    """
    out = []
    for p in parts:
        if type(p) is not bytes:
            p = _as_bytes(p)
        out.append(len(p).to_bytes(4, "big"))
        out.append(p)
    return (len(out) // 2).to_bytes(4, "big") + b"".join(out)


def split(encoded: bytes) -> list[bytes]:
    """Inverse of :func:`concat`. Raises ValueError on any framing defect."""
    if len(encoded) < 4:
        raise ValueError("truncated part count")
    count = int.from_bytes(encoded[:4], "big")
    pos, end = 4, len(encoded)
    parts = []
    for _ in range(count):
        if pos + 4 > end:
            raise ValueError("truncated length prefix")
        n = int.from_bytes(encoded[pos:pos + 4], "big")
        pos += 4
        if pos + n > end:
            raise ValueError("part overruns buffer")
        parts.append(encoded[pos:pos + n])
        pos += n
    if pos != end:
        raise ValueError("trailing bytes after last part")
    return parts


def hash_parts(*parts) -> bytes:
    return digest(concat(parts))


def xor_mask(value: bytes, mask: bytes) -> bytes:
    if len(value) != len(mask):
        raise ValueError(f"xor operands differ in length ({len(value)} != {len(mask)})")
    return bytes(a ^ b for a, b in zip(value, mask))


@dataclass(frozen=True)
class Ciphertext:
    nonce: bytes
    body: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return concat([self.nonce, self.body, self.tag])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Ciphertext":
        try:
            nonce, body, tag = split(data)
        except ValueError as exc:
            raise TamperError(f"malformed ciphertext: {exc}") from None
        return cls(nonce, body, tag)


def _check_key(key: bytes):
    if len(key) != KEY_SIZE:
        raise ValueError(f"symmetric key must be {KEY_SIZE} bytes, got {len(key)}")


def encrypt(key: bytes, plaintext: bytes, nonce: bytes, aad: bytes = b"") -> Ciphertext:
    _check_key(key)
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    sealed = ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)
    return Ciphertext(nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def decrypt(key: bytes, ct: Ciphertext, aad: bytes = b"") -> bytes:
    _check_key(key)
    if len(ct.nonce) != NONCE_SIZE or len(ct.tag) != TAG_SIZE:
        raise TamperError("ciphertext framing is invalid")
    try:
        return ChaCha20Poly1305(key).decrypt(ct.nonce, ct.body + ct.tag, aad)
    except InvalidTag:
        raise TamperError("authentication tag mismatch") from None


class NonceCounter:
    """Issues 12-byte nonces as ``prefix || counter`` and never repeats one.

    ``prefix`` is 4 bytes and separates independent senders sharing a key.
    """

    def __init__(self, prefix: bytes, start: int = 0):
        if len(prefix) != 4:
            raise ValueError("nonce prefix must be 4 bytes")
        self.prefix = prefix
        self.next_value = start

    def next(self) -> bytes:
        if self.next_value >= 1 << 64:
            raise NonceReuseError("nonce counter exhausted")
        nonce = self.prefix + self.next_value.to_bytes(8, "big")
        self.next_value += 1
        return nonce


class NonceWindow:
    """Receiver-side guard: accepts only strictly increasing counters per prefix."""

    def __init__(self, prefix: bytes, last_seen: int = -1):
        self.prefix = prefix
        self.last_seen = last_seen

    def check(self, nonce: bytes):
        if len(nonce) != NONCE_SIZE or nonce[:4] != self.prefix:
            raise TamperError("nonce from unexpected sender")
        value = int.from_bytes(nonce[4:], "big")
        if value <= self.last_seen:
            raise NonceReuseError(f"nonce counter {value} already used")
        return value

    def accept(self, value: int):
        self.last_seen = value
