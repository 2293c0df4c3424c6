"""Deterministic cryptographic primitives.

SHA-256 digests, Ed25519 signatures, X25519+HKDF+ChaCha20-Poly1305 sealed
boxes for public-key encryption, and ChaCha20-Poly1305 for symmetric
encryption.  Every random byte comes from an explicitly passed :class:`Rng`.

An Ed25519 key pair doubles as an X25519 key pair (the standard birational
map used by libsodium), so one 32-byte public key is both an account id and
an encryption target.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

DIGEST_SIZE = 32
SIG_SIZE = 64
_NONCE_SIZE = 12
_P25519 = 2**255 - 19
_RAW = serialization.Encoding.Raw


class DecryptionError(Exception):
    """Wrong key or tampered ciphertext."""


class Rng:
    """Seeded random stream; ``split`` derives independent named substreams."""

    def __init__(self, seed: int):
        self.seed = seed & 0xFFFFFFFFFFFFFFFF
        self._r = random.Random(self.seed)
        self.position = 0

    def bytes(self, n: int) -> bytes:
        self.position += n
        return self._r.randbytes(n)

    def random(self) -> float:
        self.position += 8
        return self._r.random()

    def randint(self, lo: int, hi: int) -> int:
        self.position += 8
        return self._r.randint(lo, hi)

    def uniform(self, lo: float, hi: float) -> float:
        self.position += 8
        return self._r.uniform(lo, hi)

    def choice(self, seq):
        self.position += 8
        return self._r.choice(seq)

    def shuffle(self, seq: list) -> None:
        self.position += 8 * len(seq)
        self._r.shuffle(seq)

    def split(self, name: str) -> "Rng":
        h = hashlib.sha256(self.seed.to_bytes(8, "big") + name.encode()).digest()
        return Rng(int.from_bytes(h[:8], "big"))


@dataclass(frozen=True)
class Digest:
    value: bytes

    def __post_init__(self):
        if len(self.value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(self.value)}")

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def fromhex(cls, s: str) -> "Digest":
        return cls(bytes.fromhex(s))

    def __bytes__(self) -> bytes:
        return self.value

    def __repr__(self) -> str:
        return f"Digest({self.value.hex()[:16]}..)"


def digest(message: bytes) -> Digest:
    return Digest(hashlib.sha256(message).digest())


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes = field(repr=False)

    @classmethod
    def from_secret(cls, secret: bytes) -> "KeyPair":
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        return cls(sk.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw), secret)


@dataclass(frozen=True)
class Signature:
    value: bytes
    signer: bytes

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class SymKey:
    value: bytes = field(repr=False)
    context: str = ""


def keygen(rng: Rng) -> KeyPair:
    return KeyPair.from_secret(rng.bytes(32))


def sign(secret: bytes, message: bytes) -> Signature:
    sk = Ed25519PrivateKey.from_private_bytes(secret)
    pub = sk.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    return Signature(sk.sign(message), pub)


def verify(public: bytes, message: bytes, sig: Signature | bytes) -> bool:
    raw = sig.value if isinstance(sig, Signature) else sig
    if not isinstance(raw, (bytes, bytearray)) or len(raw) != SIG_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public)).verify(bytes(raw), message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def _x25519_secret(secret: bytes) -> X25519PrivateKey:
    return X25519PrivateKey.from_private_bytes(hashlib.sha512(secret).digest()[:32])


def _x25519_public(public: bytes) -> X25519PublicKey:
    # Edwards y -> Montgomery u = (1 + y) / (1 - y) mod p
    y = int.from_bytes(public, "little") & ((1 << 255) - 1)
    u = (1 + y) * pow((1 - y) % _P25519, _P25519 - 2, _P25519) % _P25519
    return X25519PublicKey.from_public_bytes(u.to_bytes(32, "little"))


def _hkdf(material: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(material)


def pk_encrypt(public: bytes, plaintext: bytes, rng: Rng) -> bytes:
    """Sealed box: ephemeral X25519 public (32) || nonce (12) || AEAD ciphertext."""
    eph = X25519PrivateKey.from_private_bytes(rng.bytes(32))
    eph_pub = eph.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    shared = eph.exchange(_x25519_public(public))
    key = _hkdf(shared, b"genie-box" + eph_pub + public)
    nonce = rng.bytes(_NONCE_SIZE)
    return eph_pub + nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, eph_pub)


def pk_decrypt(secret: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) < 32 + _NONCE_SIZE + 16:
        raise DecryptionError("ciphertext too short")
    eph_pub, nonce, body = ciphertext[:32], ciphertext[32:44], ciphertext[44:]
    me = KeyPair.from_secret(secret)
    try:
        shared = _x25519_secret(secret).exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = _hkdf(shared, b"genie-box" + eph_pub + me.public)
        return ChaCha20Poly1305(key).decrypt(nonce, body, eph_pub)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionError("public-key decryption failed") from exc


def sym_encrypt(key: SymKey, plaintext: bytes, rng: Rng) -> bytes:
    nonce = rng.bytes(_NONCE_SIZE)
    return nonce + ChaCha20Poly1305(key.value).encrypt(nonce, plaintext, key.context.encode())


def sym_decrypt(key: SymKey, ciphertext: bytes) -> bytes:
    if len(ciphertext) < _NONCE_SIZE + 16:
        raise DecryptionError("ciphertext too short")
    try:
        return ChaCha20Poly1305(key.value).decrypt(
            ciphertext[:_NONCE_SIZE], ciphertext[_NONCE_SIZE:], key.context.encode()
        )
    except InvalidTag as exc:
        raise DecryptionError("symmetric decryption failed") from exc


def kdf(root: bytes, context: str) -> SymKey:
    return SymKey(_hkdf(root, b"genie-kdf:" + context.encode()), context)
