"""secp256k1 arithmetic and the additive partial-signature scheme.

A partial signature over a record hash ``h`` is ``k * h mod n`` for a member
private key ``k``.  Partial signatures from several members add up to a
multisignature, which verifies against the shared public key
``sum(h * P_i)``:

    s * G == sum(h * P_i)

Note that this is *not* a secure signature scheme: anyone who sees a partial
signature and its hash recovers the private key as ``s * h^-1 mod n``.  It is
implemented as the protocol defines it, without nonces or challenges, and
without constant-time guarantees.

Scalars are plain ``int`` values in ``[0, CURVE_ORDER)``.
"""
from __future__ import annotations

import secrets
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional

from .errors import EmptyAggregate, InvalidDigest, InvalidKey, InvalidPoint

FIELD_PRIME = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F
CURVE_ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
CURVE_B = 7

GX = 0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798
GY = 0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8

_P = FIELD_PRIME


def _on_curve(x: int, y: int) -> bool:
    return (y * y - x * x * x - CURVE_B) % _P == 0


# Jacobian coordinates (X, Y, Z) represent the affine point (X/Z^2, Y/Z^3);
# Z == 0 is the point at infinity.
_JINF = (1, 1, 0)


def _jdouble(p):
    X, Y, Z = p
    if Z == 0 or Y == 0:
        return _JINF
    A = X * X % _P
    B = Y * Y % _P
    C = B * B % _P
    D = 2 * ((X + B) * (X + B) - A - C) % _P
    E = 3 * A % _P
    X3 = (E * E - 2 * D) % _P
    Y3 = (E * (D - X3) - 8 * C) % _P
    Z3 = 2 * Y * Z % _P
    return (X3, Y3, Z3)


def _jadd(p, q):
    X1, Y1, Z1 = p
    X2, Y2, Z2 = q
    if Z1 == 0:
        return q
    if Z2 == 0:
        return p
    Z1Z1 = Z1 * Z1 % _P
    Z2Z2 = Z2 * Z2 % _P
    U1 = X1 * Z2Z2 % _P
    U2 = X2 * Z1Z1 % _P
    S1 = Y1 * Z2 * Z2Z2 % _P
    S2 = Y2 * Z1 * Z1Z1 % _P
    if U1 == U2:
        if S1 != S2:
            return _JINF
        return _jdouble(p)
    H = (U2 - U1) % _P
    R = (S2 - S1) % _P
    H2 = H * H % _P
    H3 = H * H2 % _P
    U1H2 = U1 * H2 % _P
    X3 = (R * R - H3 - 2 * U1H2) % _P
    Y3 = (R * (U1H2 - X3) - S1 * H3) % _P
    Z3 = H * Z1 * Z2 % _P
    return (X3, Y3, Z3)


def _jadd_affine(p, x2, y2):
    """Mixed addition of a Jacobian point and an affine point (Z2 == 1)."""
    X1, Y1, Z1 = p
    if Z1 == 0:
        return (x2, y2, 1)
    Z1Z1 = Z1 * Z1 % _P
    U2 = x2 * Z1Z1 % _P
    S2 = y2 * Z1 * Z1Z1 % _P
    if X1 == U2:
        if Y1 != S2:
            return _JINF
        return _jdouble(p)
    H = (U2 - X1) % _P
    R = (S2 - Y1) % _P
    H2 = H * H % _P
    H3 = H * H2 % _P
    U1H2 = X1 * H2 % _P
    X3 = (R * R - H3 - 2 * U1H2) % _P
    Y3 = (R * (U1H2 - X3) - Y1 * H3) % _P
    Z3 = H * Z1 % _P
    return (X3, Y3, Z3)


def _to_affine(p) -> "CurvePoint":
    X, Y, Z = p
    if Z == 0:
        return INFINITY
    zinv = pow(Z, -1, _P)
    zinv2 = zinv * zinv % _P
    return CurvePoint(X * zinv2 % _P, Y * zinv2 * zinv % _P)


def _jmul(k: int, p) -> tuple:
    """Fixed 4-bit window multiplication of a Jacobian point."""
    if k == 0 or p[2] == 0:
        return _JINF
    table = [_JINF, p]
    for _ in range(14):
        table.append(_jadd(table[-1], p))
    acc = _JINF
    for shift in range((k.bit_length() + 3) // 4 * 4 - 4, -4, -4):
        acc = _jdouble(_jdouble(_jdouble(_jdouble(acc))))
        nibble = (k >> shift) & 0xF
        if nibble:
            acc = _jadd(acc, table[nibble])
    return acc


@dataclass(frozen=True)
class CurvePoint:
    """An affine secp256k1 point; ``x is None`` encodes the point at infinity."""

    x: Optional[int]
    y: Optional[int]

    def __post_init__(self):
        if (self.x is None) != (self.y is None):
            raise InvalidPoint("both coordinates must be set or both None")
        if self.x is not None and not (
            0 <= self.x < _P and 0 <= self.y < _P and _on_curve(self.x, self.y)
        ):
            raise InvalidPoint("point is not on secp256k1")

    @property
    def is_infinity(self) -> bool:
        return self.x is None

    def _jacobian(self):
        return _JINF if self.x is None else (self.x, self.y, 1)

    def __add__(self, other: "CurvePoint") -> "CurvePoint":
        if not isinstance(other, CurvePoint):
            return NotImplemented
        return _to_affine(_jadd(self._jacobian(), other._jacobian()))

    def __neg__(self) -> "CurvePoint":
        if self.x is None:
            return self
        return CurvePoint(self.x, (-self.y) % _P)

    def __mul__(self, k: int) -> "CurvePoint":
        if not isinstance(k, int):
            return NotImplemented
        k %= CURVE_ORDER
        if self == G:
            return base_multiply(k)
        return _to_affine(_jmul(k, self._jacobian()))

    __rmul__ = __mul__

    def to_bytes(self) -> bytes:
        if self.x is None:
            return b"\x00"
        return bytes([2 + (self.y & 1)]) + self.x.to_bytes(32, "big")

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CurvePoint":
        return _decode_point(bytes(data))

    @classmethod
    def from_hex(cls, text: str) -> "CurvePoint":
        try:
            data = bytes.fromhex(text)
        except (ValueError, TypeError) as exc:
            raise InvalidPoint(f"not hex: {text!r}") from exc
        return _decode_point(data)


@lru_cache(maxsize=4096)
def _decode_point(data: bytes) -> CurvePoint:
    if data == b"\x00":
        return INFINITY
    if len(data) != 33 or data[0] not in (2, 3):
        raise InvalidPoint("expected a 33-byte compressed point")
    x = int.from_bytes(data[1:], "big")
    if x >= _P:
        raise InvalidPoint("x coordinate out of range")
    rhs = (pow(x, 3, _P) + CURVE_B) % _P
    y = pow(rhs, (_P + 1) // 4, _P)
    if y * y % _P != rhs:
        raise InvalidPoint("x is not on the curve")
    if (y & 1) != (data[0] & 1):
        y = _P - y
    return CurvePoint(x, y)


INFINITY = CurvePoint(None, None)
G = CurvePoint(GX, GY)


def _build_base_table():
    # _BASE_TABLE[i][j] = (x, y) of j * 16**i * G, for j in 1..15
    table = []
    base = G._jacobian()
    for _ in range(64):
        row = [None]
        acc = base
        for _ in range(15):
            pt = _to_affine(acc)
            row.append((pt.x, pt.y))
            acc = _jadd(acc, base)
        table.append(row)
        for _ in range(4):
            base = _jdouble(base)
    return table


_BASE_TABLE = _build_base_table()


def _jbase(k: int):
    acc = _JINF
    i = 0
    while k:
        nibble = k & 0xF
        if nibble:
            x, y = _BASE_TABLE[i][nibble]
            acc = _jadd_affine(acc, x, y)
        k >>= 4
        i += 1
    return acc


def base_multiply(k: int) -> CurvePoint:
    """Return ``k * G`` using the precomputed generator table."""
    return _to_affine(_jbase(k % CURVE_ORDER))


def _valid_scalar(s) -> bool:
    return isinstance(s, int) and not isinstance(s, bool) and 0 <= s < CURVE_ORDER


def scalar_hex(s: int) -> str:
    return s.to_bytes(32, "big").hex()


def scalar_from_hex(text: str) -> int:
    """Parse a 64-char hex scalar; raises ``ValueError`` on malformed input."""
    if not isinstance(text, str) or len(text) != 64:
        raise ValueError("scalar must be 64 hex characters")
    value = int(text, 16)
    if value >= CURVE_ORDER:
        raise ValueError("scalar out of range")
    return value


def hash_to_scalar(digest: bytes) -> int:
    """Interpret a 32-byte digest big-endian and reduce it modulo the group order."""
    if not isinstance(digest, (bytes, bytearray)) or len(digest) != 32:
        raise InvalidDigest("digest must be exactly 32 bytes")
    return int.from_bytes(digest, "big") % CURVE_ORDER


def derive_public_key(private: int) -> CurvePoint:
    if not _valid_scalar(private) or private == 0:
        raise InvalidKey("private key must be in [1, n)")
    return base_multiply(private)


@dataclass(frozen=True)
class KeyPair:
    private: int
    public: CurvePoint

    @classmethod
    def from_private(cls, private: int) -> "KeyPair":
        return cls(private, derive_public_key(private))

    @classmethod
    def generate(cls, rng=None) -> "KeyPair":
        """New random key pair; pass a ``random.Random`` for reproducible keys."""
        while True:
            if rng is None:
                k = secrets.randbelow(CURVE_ORDER)
            else:
                k = rng.randrange(CURVE_ORDER)
            if k:
                return cls.from_private(k)

    @property
    def public_hex(self) -> str:
        return self.public.hex()


def partial_sign(private: int, hash_scalar: int) -> int:
    if not _valid_scalar(private) or private == 0:
        raise InvalidKey("private key must be in [1, n)")
    return private * hash_scalar % CURVE_ORDER


@lru_cache(maxsize=65536)
def verify_partial(sig: int, public: CurvePoint, hash_scalar: int) -> bool:
    """Check ``sig * G == hash * public``."""
    if not _valid_scalar(sig) or not isinstance(public, CurvePoint):
        return False
    return base_multiply(sig) == public * hash_scalar


def aggregate_partials(partials: Iterable[int]) -> int:
    partials = list(partials)
    if not partials:
        raise EmptyAggregate("cannot aggregate an empty list of partial signatures")
    return sum(partials) % CURVE_ORDER


def build_shared_public_key(publics: Iterable[CurvePoint], hash_scalar: int) -> CurvePoint:
    """Return ``sum(hash * P_i)``, computed as ``hash * sum(P_i)``."""
    publics = list(publics)
    if not publics:
        raise EmptyAggregate("cannot build a shared key from no public keys")
    acc = _JINF
    for p in publics:
        acc = _jadd(acc, p._jacobian())
    return _to_affine(_jmul(hash_scalar % CURVE_ORDER, acc))


@lru_cache(maxsize=65536)
def verify_multisig(sig: int, shared_public_key: CurvePoint) -> bool:
    """Check ``sig * G == shared_public_key``."""
    if not _valid_scalar(sig) or not isinstance(shared_public_key, CurvePoint):
        return False
    return base_multiply(sig) == shared_public_key


def compare_signatures(a: int, b: int) -> int:
    """Three-way integer comparison: -1, 0 or 1."""
    return (a > b) - (a < b)
