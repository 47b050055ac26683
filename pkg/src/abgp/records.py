"""Record model, canonical hashing, validation and the signer bitmap codec."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Mapping, Optional

from . import crypto
from .crypto import CurvePoint
from .errors import BadBitmap, UnknownSigner, WireError

FIELD_SEPARATOR = b"\x1f"


class SignatureType(str, enum.Enum):
    INTERMEDIATE = "INTERMEDIATE"
    MULTISIG = "MULTISIG"


class Verdict(str, enum.Enum):
    OK = "ok"
    BAD_HASH = "BadHash"
    UNKNOWN_SIGNER = "UnknownSigner"
    BAD_PARTIAL_SIGNATURE = "BadPartialSignature"
    SHARED_KEY_MISMATCH = "SharedKeyMismatch"
    BAD_MULTISIG = "BadMultisig"
    BAD_SIGNATURE_COUNT = "BadSignatureCount"

    def __bool__(self) -> bool:
        return self is Verdict.OK


@dataclass(frozen=True)
class ClusterSpec:
    """The known membership of a cluster.

    ``members`` holds compressed public keys as lowercase hex, sorted ascending.
    """

    members: tuple

    def __post_init__(self):
        members = tuple(sorted(set(self.members)))
        if len(members) != len(self.members):
            raise ValueError("duplicate cluster member")
        if len(members) < 3:
            raise ValueError("a cluster needs at least 3 members")
        for m in members:
            CurvePoint.from_hex(m)
        object.__setattr__(self, "members", members)

    @classmethod
    def from_public_keys(cls, keys: Iterable) -> "ClusterSpec":
        return cls(tuple(k.hex() if isinstance(k, CurvePoint) else str(k).lower() for k in keys))

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def fault_bound(self) -> int:
        return (self.size - 1) // 2

    @property
    def quorum(self) -> int:
        return self.fault_bound + 1

    @cached_property
    def _member_set(self) -> frozenset:
        return frozenset(self.members)

    def is_member(self, key_hex) -> bool:
        return key_hex in self._member_set

    def point(self, key_hex: str) -> CurvePoint:
        return CurvePoint.from_hex(key_hex)


@dataclass(frozen=True)
class RecordModel:
    hash: str
    key: str
    value: str
    version: int
    signature_type: SignatureType
    # signer hex -> scalar; for MULTISIG the single key is the shared public key
    signatures: Mapping[str, int]
    public_keys: tuple
    timestamp: int = 0
    timestamp_index: int = 0
    created_at: int = 0
    state_hash: Optional[int] = field(default=None, compare=False)

    __hash__ = None

    @property
    def is_multisig(self) -> bool:
        return self.signature_type is SignatureType.MULTISIG

    @property
    def stamp(self) -> tuple:
        return (self.timestamp, self.timestamp_index)

    @property
    def order_key(self) -> tuple:
        return (self.timestamp, self.timestamp_index, self.hash)

    @property
    def multisig(self) -> int:
        """The aggregated signature scalar of a MULTISIG record."""
        (sig,) = self.signatures.values()
        return sig

    def signer_count(self) -> int:
        return len(self.public_keys) if self.is_multisig else len(self.signatures)


def compute_record_hash(key: str, value: str, version: int) -> bytes:
    preimage = FIELD_SEPARATOR.join(
        (key.encode("utf-8"), value.encode("utf-8"), str(int(version)).encode("ascii"))
    )
    return hashlib.sha256(preimage).digest()


def record_hash_hex(key: str, value: str, version: int) -> str:
    return compute_record_hash(key, value, version).hex()


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate_record(record: RecordModel, cluster: ClusterSpec) -> Verdict:
    """Check a record from an untrusted source.

    Never raises on malformed content: anything that cannot be checked is
    reported through the returned verdict.
    """
    try:
        return _validate(record, cluster)
    except (TypeError, ValueError, AttributeError):
        return Verdict.BAD_SIGNATURE_COUNT


def _validate(record, cluster):
    try:
        if not (isinstance(record.key, str) and isinstance(record.value, str)
                and _is_int(record.version) and record.version >= 0):
            return Verdict.BAD_HASH
        expected = record_hash_hex(record.key, record.value, record.version)
    except (UnicodeEncodeError, AttributeError, TypeError):
        return Verdict.BAD_HASH
    if record.hash != expected:
        return Verdict.BAD_HASH

    try:
        public_keys = tuple(record.public_keys)
        signatures = dict(record.signatures)
    except (TypeError, ValueError):
        return Verdict.BAD_SIGNATURE_COUNT
    if any(not cluster.is_member(pk) for pk in public_keys):
        return Verdict.UNKNOWN_SIGNER
    if list(public_keys) != sorted(set(public_keys)):
        return Verdict.BAD_SIGNATURE_COUNT
    h = crypto.hash_to_scalar(bytes.fromhex(record.hash))

    if record.signature_type is SignatureType.INTERMEDIATE:
        if any(not cluster.is_member(signer) for signer in signatures):
            return Verdict.UNKNOWN_SIGNER
        if not 1 <= len(signatures) < cluster.quorum:
            return Verdict.BAD_SIGNATURE_COUNT
        if set(signatures) != set(public_keys):
            return Verdict.BAD_SIGNATURE_COUNT
        for signer, sig in signatures.items():
            if not _is_int(sig) or not crypto.verify_partial(sig, cluster.point(signer), h):
                return Verdict.BAD_PARTIAL_SIGNATURE
        return Verdict.OK

    if record.signature_type is SignatureType.MULTISIG:
        if len(signatures) != 1 or len(public_keys) < cluster.quorum:
            return Verdict.BAD_SIGNATURE_COUNT
        ((shared_hex, sig),) = signatures.items()
        if not _is_int(sig):
            return Verdict.BAD_MULTISIG
        shared = shared_key_for(public_keys, record.hash)
        if shared.hex() != shared_hex:
            return Verdict.SHARED_KEY_MISMATCH
        if not crypto.verify_multisig(sig, shared):
            return Verdict.BAD_MULTISIG
        return Verdict.OK

    return Verdict.BAD_SIGNATURE_COUNT


def shared_key_for(public_keys: Iterable[str], hash_hex: str) -> CurvePoint:
    h = crypto.hash_to_scalar(bytes.fromhex(hash_hex))
    return _shared_key(tuple(public_keys), h)


@lru_cache(maxsize=16384)
def _shared_key(public_keys: tuple, h: int) -> CurvePoint:
    return crypto.build_shared_public_key([CurvePoint.from_hex(pk) for pk in public_keys], h)


def replication_order(a: RecordModel, b: RecordModel) -> int:
    """Three-way comparison by (timestamp, timestampIndex, hash)."""
    ka, kb = a.order_key, b.order_key
    return (ka > kb) - (ka < kb)


def bitmap_encode(cluster: ClusterSpec, present: Iterable[str]) -> int:
    present = set(present)
    unknown = present - set(cluster.members)
    if unknown:
        raise UnknownSigner(f"not a cluster member: {sorted(unknown)[0]}")
    bits = "".join("1" if m in present else "0" for m in cluster.members)
    return int(bits, 2)


def bitmap_decode(cluster: ClusterSpec, bitmap: int) -> tuple:
    if not _is_int(bitmap) or not 0 <= bitmap < (1 << cluster.size):
        raise BadBitmap(f"bitmap {bitmap!r} out of range for {cluster.size} members")
    bits = format(bitmap, f"0{cluster.size}b")
    return tuple(m for m, bit in zip(cluster.members, bits) if bit == "1")


def record_to_json(record: RecordModel, cluster: ClusterSpec) -> dict:
    return {
        "hash": record.hash,
        "key": record.key,
        "value": record.value,
        "version": record.version,
        "signatureType": record.signature_type.value,
        "signatures": {k: crypto.scalar_hex(v) for k, v in record.signatures.items()},
        "publicKeysBitmap": bitmap_encode(cluster, record.public_keys),
        "timestamp": record.timestamp,
        "timestampIndex": record.timestamp_index,
        "createdAt": record.created_at,
    }


_HEX = frozenset("0123456789abcdef")


def _hex_field(obj, name, length):
    value = obj.get(name)
    if not isinstance(value, str) or len(value) != length or not set(value) <= _HEX:
        raise WireError("BadRecord", f"{name} must be {length} lowercase hex chars")
    return value


def _int_field(obj, name):
    value = obj.get(name)
    if not _is_int(value) or value < 0:
        raise WireError("BadRecord", f"{name} must be a non-negative integer")
    return value


def record_from_json(obj, cluster: ClusterSpec) -> RecordModel:
    """Decode one record; raises ``WireError`` on any structural problem.

    Decoding does not check signatures; run ``validate_record`` on the result.
    """
    if not isinstance(obj, dict):
        raise WireError("BadRecord", "record must be an object")
    for name in ("key", "value"):
        if not isinstance(obj.get(name), str):
            raise WireError("BadRecord", f"{name} must be a string")
    try:
        signature_type = SignatureType(obj.get("signatureType"))
    except ValueError:
        raise WireError("BadRecord", "unknown signatureType") from None
    sigs = obj.get("signatures")
    if not isinstance(sigs, dict):
        raise WireError("BadRecord", "signatures must be an object")
    signatures = {}
    for signer, sig in sigs.items():
        if not isinstance(signer, str) or not isinstance(sig, str):
            raise WireError("BadRecord", "signature entries must be hex strings")
        try:
            signatures[signer] = crypto.scalar_from_hex(sig)
        except ValueError as exc:
            raise WireError("BadRecord", str(exc)) from None
    try:
        public_keys = bitmap_decode(cluster, obj.get("publicKeysBitmap"))
    except BadBitmap as exc:
        raise WireError("BadRecord", str(exc)) from None
    return RecordModel(
        hash=_hex_field(obj, "hash", 64),
        key=obj["key"],
        value=obj["value"],
        version=_int_field(obj, "version"),
        signature_type=signature_type,
        signatures=signatures,
        public_keys=public_keys,
        timestamp=_int_field(obj, "timestamp"),
        timestamp_index=_int_field(obj, "timestampIndex"),
        created_at=_int_field(obj, "createdAt"),
    )
