"""Hashing, signatures, RSA-style blind signatures and signed credential photos.

Two signature schemes share one contract:

* ``keyed-hash`` (default): a BLAKE2b MAC keyed by the private key.  Public
  verification goes through the scheme's key registry, which plays the role of
  the bank acting as certification authority.  It is fast and deterministic,
  which is what the simulator needs; it is not real public-key cryptography.
* ``ed25519``: real Ed25519 signatures from the ``cryptography`` package, with
  the same 64-byte width.

Blind signatures use textbook RSA blinding over a modulus small enough to
enumerate in tests.
"""

from __future__ import annotations

import hashlib
import math
import random
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives import serialization
import sympy

from .constants import DIGEST_BYTES, SIGNATURE_BYTES

NEVER = math.inf


class CryptoError(Exception):
    pass


class ExpiredKey(CryptoError):
    pass


class InvalidBlindingFactor(CryptoError):
    pass


def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class PublicKey:
    owner_id: str
    key: bytes
    expiry: float = NEVER
    scheme: str = "keyed-hash"


@dataclass(frozen=True)
class PrivateKey:
    owner_id: str
    key: bytes = field(repr=False)
    expiry: float = NEVER
    scheme: str = "keyed-hash"


@dataclass(frozen=True)
class KeyPair:
    public_key: PublicKey
    private_key: PrivateKey

    @property
    def owner_id(self) -> str:
        return self.public_key.owner_id

    @property
    def expiry(self) -> float:
        return self.public_key.expiry


@dataclass(frozen=True)
class Signature:
    value: bytes
    signer_id: str

    def __post_init__(self):
        if len(self.value) != SIGNATURE_BYTES:
            raise ValueError(f"signature must be {SIGNATURE_BYTES} bytes")


class KeyedHashScheme:
    name = "keyed-hash"

    def __init__(self):
        self._secrets: dict[bytes, bytes] = {}

    def generate(self, owner_id: str, seed: bytes, expiry: float = NEVER) -> KeyPair:
        secret = hashlib.blake2b(seed, person=b"manetpay-sk").digest()[:32]
        public = digest(b"pk" + secret)
        self._secrets[public] = secret
        return KeyPair(
            PublicKey(owner_id, public, expiry, self.name),
            PrivateKey(owner_id, secret, expiry, self.name),
        )

    def sign(self, private_key: PrivateKey, message: bytes) -> bytes:
        return hashlib.blake2b(message, key=private_key.key, digest_size=SIGNATURE_BYTES).digest()

    def verify(self, public_key: PublicKey, message: bytes, value: bytes) -> bool:
        secret = self._secrets.get(public_key.key)
        if secret is None:
            return False
        expected = hashlib.blake2b(message, key=secret, digest_size=SIGNATURE_BYTES).digest()
        return expected == value


class Ed25519Scheme:
    name = "ed25519"

    def generate(self, owner_id: str, seed: bytes, expiry: float = NEVER) -> KeyPair:
        secret = hashlib.sha256(b"ed25519" + seed).digest()
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        public = sk.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return KeyPair(
            PublicKey(owner_id, public, expiry, self.name),
            PrivateKey(owner_id, secret, expiry, self.name),
        )

    def sign(self, private_key: PrivateKey, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key.key).sign(message)

    def verify(self, public_key: PublicKey, message: bytes, value: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key.key).verify(value, message)
        except (InvalidSignature, ValueError):
            return False
        return True


SCHEMES = {s.name: s for s in (KeyedHashScheme(), Ed25519Scheme())}


def generate_keypair(
    owner_id: str, seed: bytes | int, expiry: float = NEVER, scheme: str = "keyed-hash"
) -> KeyPair:
    if isinstance(seed, int):
        seed = seed.to_bytes(16, "big", signed=False)
    return SCHEMES[scheme].generate(owner_id, owner_id.encode() + b"\x00" + seed, expiry)


def sign(key: PrivateKey, message: bytes, now: float | None = None) -> Signature:
    if now is not None and now > key.expiry:
        raise ExpiredKey(f"key of {key.owner_id} expired at {key.expiry}")
    return Signature(SCHEMES[key.scheme].sign(key, message), key.owner_id)


def verify(public_key: PublicKey, message: bytes, sig: Signature, now: float | None = None) -> bool:
    if now is not None and now > public_key.expiry:
        return False
    if sig.signer_id != public_key.owner_id:
        return False
    return SCHEMES[public_key.scheme].verify(public_key, message, sig.value)


# -- blind signatures ---------------------------------------------------------


@dataclass(frozen=True)
class BlindPublicKey:
    n: int
    e: int
    owner_id: str = "bank"


@dataclass(frozen=True)
class BlindPrivateKey:
    n: int
    d: int = field(repr=False)
    owner_id: str = "bank"


@dataclass(frozen=True)
class BlindingFactor:
    value: int


def blind_keygen(
    bits: int = 256, rng: random.Random | None = None, e: int = 65537, owner_id: str = "bank"
) -> tuple[BlindPublicKey, BlindPrivateKey]:
    """RSA key whose modulus has roughly ``bits`` bits (at most 512)."""
    if bits > 8 * SIGNATURE_BYTES:
        raise ValueError("modulus must fit in a signature")
    rng = rng or random.Random(0)
    half = bits // 2
    while True:
        p = sympy.nextprime(rng.getrandbits(half) | (1 << (half - 1)))
        q = sympy.nextprime(rng.getrandbits(bits - half) | (1 << (bits - half - 1)))
        phi = (p - 1) * (q - 1)
        if p != q and math.gcd(e, phi) == 1:
            break
    n = p * q
    return BlindPublicKey(n, e, owner_id), BlindPrivateKey(n, pow(e, -1, phi), owner_id)


def message_representative(m: bytes, n: int) -> int:
    """Full-domain hash of ``m`` into [0, n)."""
    width = (n.bit_length() + 7) // 8 + 16
    out = b""
    counter = 0
    while len(out) < width:
        out += digest(struct.pack(">I", counter) + m)
        counter += 1
    return int.from_bytes(out[:width], "big") % n


def random_blinding_factor(pk: BlindPublicKey, rng: random.Random) -> BlindingFactor:
    while True:
        r = rng.randrange(2, pk.n)
        if math.gcd(r, pk.n) == 1:
            return BlindingFactor(r)


def _check_factor(r: BlindingFactor, n: int) -> None:
    if not (0 < r.value < n) or math.gcd(r.value, n) != 1:
        raise InvalidBlindingFactor(f"blinding factor not a unit mod {n}")


def blind(m: bytes, r: BlindingFactor, pk: BlindPublicKey) -> int:
    _check_factor(r, pk.n)
    return message_representative(m, pk.n) * pow(r.value, pk.e, pk.n) % pk.n


def _int_signature(x: int, signer_id: str) -> Signature:
    return Signature(x.to_bytes(SIGNATURE_BYTES, "big"), signer_id)


def blind_sign(sk: BlindPrivateKey, blinded: int) -> Signature:
    """The signer's half: it never sees the unblinded message."""
    return _int_signature(pow(blinded % sk.n, sk.d, sk.n), sk.owner_id)


def unblind(s: Signature, r: BlindingFactor, pk: BlindPublicKey) -> Signature:
    _check_factor(r, pk.n)
    x = int.from_bytes(s.value, "big")
    return _int_signature(x * pow(r.value, -1, pk.n) % pk.n, s.signer_id)


def blind_verify(pk: BlindPublicKey, m: bytes, sig: Signature) -> bool:
    x = int.from_bytes(sig.value, "big")
    if x >= pk.n:
        return False
    return pow(x, pk.e, pk.n) == message_representative(m, pk.n)


# -- signed photo credential ----------------------------------------------------


@dataclass(frozen=True)
class SignedPhoto:
    photo_digest: bytes
    bank_signature: Signature
    customer_signature: Signature
    timestamp: float

    def payload(self) -> bytes:
        return photo_payload(self.photo_digest, self.timestamp)


def photo_payload(photo_digest: bytes, timestamp: float) -> bytes:
    return b"photo" + photo_digest + struct.pack(">d", timestamp)


def issue_signed_photo(
    bank_key: PrivateKey, customer_key: PrivateKey, photo: bytes, now: float
) -> SignedPhoto:
    d = digest(photo)
    payload = photo_payload(d, now)
    return SignedPhoto(d, sign(bank_key, payload, now), sign(customer_key, payload, now), now)


def verify_signed_photo(
    p: SignedPhoto,
    bank_pub: PublicKey,
    customer_pub: PublicKey,
    presented_photo: bytes,
    now: float | None = None,
) -> bool:
    if len(p.photo_digest) != DIGEST_BYTES or digest(presented_photo) != p.photo_digest:
        return False
    if now is not None and p.timestamp > now:
        return False
    payload = p.payload()
    return verify(bank_pub, payload, p.bank_signature, now) and verify(
        customer_pub, payload, p.customer_signature, now
    )
