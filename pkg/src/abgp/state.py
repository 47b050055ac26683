"""Per-node record store: local append, remote append, promotion and the root."""
from __future__ import annotations

import bisect
import dataclasses
import enum
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from . import crypto
from .crypto import CURVE_ORDER, KeyPair
from .errors import DuplicateRecord, InternalError, QuorumNotReached
from .records import (
    ClusterSpec,
    RecordModel,
    SignatureType,
    Verdict,
    compute_record_hash,
    shared_key_for,
    validate_record,
)


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


class Outcome(str, enum.Enum):
    STORED_NEW = "StoredNew"
    SIGNATURES_MERGED = "SignaturesMerged"
    PROMOTED_TO_MULTISIG = "PromotedToMultisig"
    REPLACED_BY_MULTISIG = "ReplacedByMultisig"
    KEPT_HIGHER_MULTISIG = "KeptHigherMultisig"
    IGNORED = "Ignored"


@dataclass(frozen=True)
class AppendOutcome:
    kind: Outcome
    added: int = 0
    reason: Optional[str] = None
    mutated: bool = False


def promote_to_multisig(record: RecordModel, cluster: ClusterSpec) -> RecordModel:
    """Fold every partial signature held by ``record`` into one multisignature.

    All present signatures are aggregated, not just a quorum-sized subset.
    """
    if record.is_multisig or len(record.signatures) < cluster.quorum:
        raise QuorumNotReached(
            f"{len(record.signatures)} signatures, quorum is {cluster.quorum}"
        )
    signers = tuple(sorted(record.signatures))
    multisig = crypto.aggregate_partials(record.signatures[s] for s in signers)
    shared = shared_key_for(signers, record.hash)
    return dataclasses.replace(
        record,
        signature_type=SignatureType.MULTISIG,
        signatures={shared.hex(): multisig},
        public_keys=signers,
    )


class StateStore:
    """Records held by one node, keyed by hash and ordered for replication.

    Every stored record carries a replication stamp ``(timestamp,
    timestampIndex)`` allocated from this node's clock, and the stamp is
    refreshed whenever the stored record changes so that peers whose cursors
    already passed it pull it again.

    Single-writer: callers serialize mutations.  ``listener`` is called with
    each record after it has been stored (used for journaling).
    """

    def __init__(
        self,
        cluster: ClusterSpec,
        keys: KeyPair,
        clock: Callable[[], int] = wall_clock_ms,
        *,
        reduced_timestamp_index: bool = False,
        listener: Optional[Callable[[RecordModel], None]] = None,
    ):
        self.cluster = cluster
        self.keys = keys
        self.clock = clock
        self.reduced_timestamp_index = reduced_timestamp_index
        self.listener = listener
        self.records: dict[str, RecordModel] = {}
        self._index: list[tuple] = []
        self._confirmed: set[str] = set()
        self.root = 0
        # (0, 0) is the "nothing seen yet" cursor, so no record may carry it
        self.last_timestamp = 0
        self.last_timestamp_index = 0

    def __len__(self):
        return len(self.records)

    def __contains__(self, hash_hex):
        return hash_hex in self.records

    def get(self, hash_hex: str) -> Optional[RecordModel]:
        return self.records.get(hash_hex)

    @property
    def confirmed_hashes(self) -> frozenset:
        return frozenset(self._confirmed)

    def _next_stamp(self) -> tuple:
        now = max(int(self.clock()), self.last_timestamp)
        if now == self.last_timestamp:
            if self.reduced_timestamp_index:
                # index pinned to 0: keep stamps unique by moving time forward
                now += 1
                idx = 0
            else:
                idx = self.last_timestamp_index + 1
        else:
            idx = 0
        self.last_timestamp, self.last_timestamp_index = now, idx
        return now, idx

    def _put(self, record: RecordModel, *, restamp: bool = True) -> RecordModel:
        old = self.records.get(record.hash)
        if old is not None:
            pos = bisect.bisect_left(self._index, old.order_key)
            del self._index[pos]
        if restamp:
            ts, idx = self._next_stamp()
            record = dataclasses.replace(record, timestamp=ts, timestamp_index=idx)
        self.records[record.hash] = record
        bisect.insort(self._index, record.order_key)
        if self.listener is not None:
            self.listener(record)
        return record

    def append_local(self, key: str, value: str, version: int) -> RecordModel:
        """Create, sign and store a new INTERMEDIATE record."""
        digest = compute_record_hash(key, value, version)
        hash_hex = digest.hex()
        if hash_hex in self.records:
            raise DuplicateRecord(hash_hex)
        h = crypto.hash_to_scalar(digest)
        signer = self.keys.public_hex
        created = int(self.clock())
        record = RecordModel(
            hash=hash_hex,
            key=key,
            value=value,
            version=version,
            signature_type=SignatureType.INTERMEDIATE,
            signatures={signer: crypto.partial_sign(self.keys.private, h)},
            public_keys=(signer,),
            created_at=created,
        )
        return self._put(record)

    def append_remote(self, incoming: RecordModel) -> AppendOutcome:
        """Apply a record received from a peer."""
        verdict = validate_record(incoming, self.cluster)
        if verdict is not Verdict.OK:
            return AppendOutcome(Outcome.IGNORED, reason=verdict.value)
        incoming = dataclasses.replace(incoming, state_hash=None)
        local = self.records.get(incoming.hash)

        if local is None:
            if incoming.is_multisig:
                self._confirm(incoming)
                return AppendOutcome(Outcome.STORED_NEW, mutated=True)
            own = self.keys.public_hex
            signatures = dict(incoming.signatures)
            if own not in signatures:
                h = crypto.hash_to_scalar(bytes.fromhex(incoming.hash))
                signatures[own] = crypto.partial_sign(self.keys.private, h)
            record = dataclasses.replace(
                incoming,
                signatures=signatures,
                public_keys=tuple(sorted(signatures)),
            )
            if len(signatures) >= self.cluster.quorum:
                self._confirm(promote_to_multisig(record, self.cluster))
                return AppendOutcome(Outcome.PROMOTED_TO_MULTISIG, mutated=True)
            self._put(record)
            return AppendOutcome(Outcome.STORED_NEW, mutated=True)

        if local.is_multisig and incoming.is_multisig:
            order = crypto.compare_signatures(incoming.multisig, local.multisig)
            if order == 0:
                return AppendOutcome(Outcome.IGNORED, reason="duplicate")
            if order > 0:
                self._put(dataclasses.replace(
                    incoming, created_at=local.created_at, state_hash=self.root))
            return AppendOutcome(Outcome.KEPT_HIGHER_MULTISIG, mutated=order > 0)

        if local.is_multisig:
            return AppendOutcome(Outcome.IGNORED, reason="already confirmed")

        if incoming.is_multisig:
            self._confirm(dataclasses.replace(incoming, created_at=local.created_at))
            return AppendOutcome(Outcome.REPLACED_BY_MULTISIG, mutated=True)

        new = {s: v for s, v in incoming.signatures.items() if s not in local.signatures}
        if not new:
            return AppendOutcome(Outcome.SIGNATURES_MERGED, added=0)
        signatures = {**local.signatures, **new}
        record = dataclasses.replace(
            local, signatures=signatures, public_keys=tuple(sorted(signatures)))
        if len(signatures) >= self.cluster.quorum:
            self._confirm(promote_to_multisig(record, self.cluster))
            return AppendOutcome(Outcome.PROMOTED_TO_MULTISIG, added=len(new), mutated=True)
        self._put(record)
        return AppendOutcome(Outcome.SIGNATURES_MERGED, added=len(new), mutated=True)

    def _confirm(self, record: RecordModel) -> RecordModel:
        root = self.update_root(bytes.fromhex(record.hash))
        return self._put(dataclasses.replace(record, state_hash=root))

    def update_root(self, confirmed_hash: bytes) -> int:
        """Add a newly confirmed hash to the running root and return the new root.

        If the record is already stored, its stateHash is set to the new root.
        """
        hash_hex = bytes(confirmed_hash).hex()
        if hash_hex in self._confirmed:
            raise InternalError(f"hash {hash_hex} already counted in the root")
        self._confirmed.add(hash_hex)
        self.root = (self.root + crypto.hash_to_scalar(confirmed_hash)) % CURVE_ORDER
        stored = self.records.get(hash_hex)
        if stored is not None and stored.is_multisig:
            self.records[hash_hex] = dataclasses.replace(stored, state_hash=self.root)
        return self.root

    def current_root(self) -> int:
        """stateHash of the most recently stamped confirmed record, or 0."""
        for key in reversed(self._index):
            record = self.records[key[2]]
            if record.is_multisig:
                return record.state_hash
        return 0

    def records_after(self, ts: int, idx: int, limit: int) -> list[RecordModel]:
        if limit < 1:
            raise ValueError("limit must be >= 1")
        start = bisect.bisect_left(self._index, (ts, idx + 1, ""))
        return [self.records[key[2]] for key in self._index[start:start + limit]]

    def replay_validate(self) -> bool:
        """Recompute the root from scratch and re-validate every stored record."""
        total = 0
        confirmed = set()
        for record in self.records.values():
            if validate_record(record, self.cluster) is not Verdict.OK:
                return False
            if record.is_multisig:
                total += crypto.hash_to_scalar(bytes.fromhex(record.hash))
                confirmed.add(record.hash)
        total %= CURVE_ORDER
        stamps = [key[:2] for key in self._index]
        if len(set(stamps)) != len(stamps) or len(stamps) != len(self.records):
            return False
        return (
            confirmed == self._confirmed
            and total == self.root
            and self.current_root() == self.root
        )

    @classmethod
    def restore(
        cls,
        records: Iterable[RecordModel],
        cluster: ClusterSpec,
        keys: KeyPair,
        clock: Callable[[], int] = wall_clock_ms,
        **kwargs,
    ) -> "StateStore":
        """Rebuild a store from previously stored records, keeping their stamps.

        Later entries for the same hash replace earlier ones.  The running root
        is recomputed from the confirmed set; call ``replay_validate`` to check
        it against the stored stateHash values.
        """
        listener = kwargs.pop("listener", None)
        store = cls(cluster, keys, clock, **kwargs)
        for record in records:
            store._put(record, restamp=False)
        store.listener = listener
        for record in store.records.values():
            if record.is_multisig:
                store._confirmed.add(record.hash)
                store.root += crypto.hash_to_scalar(bytes.fromhex(record.hash))
        store.root %= CURVE_ORDER
        if store._index:
            store.last_timestamp, store.last_timestamp_index = store._index[-1][:2]
        return store
