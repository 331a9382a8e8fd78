"""AES-128-GCM envelopes for everything confidential that enters the heap.

Stored layout: ``iv (12) || mac (16) || ciphertext (len(plaintext))``.
"""

from __future__ import annotations

import os
import secrets
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_SIZE = 16
IV_SIZE = 12
MAC_SIZE = 16
OVERHEAD = IV_SIZE + MAC_SIZE
KEY_ENV = "PMTRAIN_KEY"


class IntegrityError(Exception):
    """MAC verification failed: tampered envelope or wrong key."""


@dataclass(frozen=True)
class Key128:
    key_bytes: bytes

    def __post_init__(self):
        if len(self.key_bytes) != KEY_SIZE:
            raise ValueError(f"key must be {KEY_SIZE} bytes, got {len(self.key_bytes)}")

    def __repr__(self):
        return "Key128(<redacted>)"


@dataclass(frozen=True)
class Envelope:
    iv: bytes
    mac: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return self.iv + self.mac + self.ciphertext

    @classmethod
    def from_bytes(cls, raw) -> "Envelope":
        raw = bytes(raw)
        if len(raw) < OVERHEAD:
            raise IntegrityError(f"envelope too short ({len(raw)} bytes)")
        return cls(raw[:IV_SIZE], raw[IV_SIZE:OVERHEAD], raw[OVERHEAD:])

    def __len__(self):
        return OVERHEAD + len(self.ciphertext)


def generate_key(entropy=secrets.token_bytes) -> Key128:
    return Key128(entropy(KEY_SIZE))


def load_key(path=None) -> Key128:
    """Key from a 16-byte raw file, else from ``$PMTRAIN_KEY`` (hex)."""
    if path is not None:
        with open(path, "rb") as fh:
            return Key128(fh.read())
    hexkey = os.environ.get(KEY_ENV)
    if not hexkey:
        raise ValueError(f"no key file given and ${KEY_ENV} unset")
    return Key128(bytes.fromhex(hexkey))


def save_key(key: Key128, path) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(key.key_bytes)


def encrypt(k: Key128, plaintext) -> Envelope:
    iv = os.urandom(IV_SIZE)
    sealed = AESGCM(k.key_bytes).encrypt(iv, bytes(plaintext), None)
    return Envelope(iv, sealed[-MAC_SIZE:], sealed[:-MAC_SIZE])


def decrypt(k: Key128, e: Envelope) -> bytes:
    try:
        return AESGCM(k.key_bytes).decrypt(e.iv, e.ciphertext + e.mac, None)
    except InvalidTag:
        raise IntegrityError("MAC check failed") from None


def envelope_overhead(buffer_count: int) -> int:
    if buffer_count < 0:
        raise ValueError("buffer_count must be >= 0")
    return OVERHEAD * buffer_count
