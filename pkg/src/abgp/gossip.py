"""Pull-based replication: cursors, pull exchanges and the gossip round."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .errors import NoPeers, PeerUnavailable, WireError
from .records import (
    ClusterSpec,
    RecordModel,
    _is_int,
    record_from_json,
    record_to_json,
)
from .state import AppendOutcome, StateStore

log = logging.getLogger(__name__)


class GossipMode(str, enum.Enum):
    RANDOM_PEER = "RANDOM_PEER"
    ALL_PEERS = "ALL_PEERS"


@dataclass(frozen=True)
class GossipConfig:
    min_interval_ms: int = 150
    max_interval_ms: int = 300
    batch_limit: int = 10
    mode: GossipMode = GossipMode.RANDOM_PEER
    neighbors: tuple = ()

    def __post_init__(self):
        if not 0 <= self.min_interval_ms <= self.max_interval_ms:
            raise ValueError("need 0 <= min_interval_ms <= max_interval_ms")
        if self.batch_limit < 1:
            raise ValueError("batch_limit must be >= 1")
        object.__setattr__(self, "mode", GossipMode(self.mode))
        object.__setattr__(self, "neighbors", tuple(self.neighbors))

    def check_connectivity(self, cluster: ClusterSpec) -> bool:
        """Warn (but do not fail) when fewer than f + 1 neighbors are configured."""
        if len(self.neighbors) < cluster.fault_bound + 1:
            log.warning(
                "only %d neighbors configured; at least %d are needed for consensus",
                len(self.neighbors), cluster.fault_bound + 1,
            )
            return False
        return True


@dataclass(frozen=True)
class PeerCursor:
    peer_id: str
    last_timestamp: int = 0
    last_timestamp_index: int = 0

    @property
    def stamp(self) -> tuple:
        return (self.last_timestamp, self.last_timestamp_index)


@dataclass(frozen=True)
class PullRequest:
    last_timestamp: int = 0
    last_timestamp_index: int = 0

    def to_json(self) -> dict:
        return {
            "type": "pull",
            "lastTimestamp": self.last_timestamp,
            "lastTimestampIndex": self.last_timestamp_index,
        }

    @classmethod
    def from_json(cls, obj) -> "PullRequest":
        if not isinstance(obj, dict) or obj.get("type") != "pull":
            raise WireError("BadRequest", "not a pull request")
        ts, idx = obj.get("lastTimestamp"), obj.get("lastTimestampIndex")
        if not (_is_int(ts) and _is_int(idx) and ts >= 0 and idx >= 0):
            raise WireError("BadRequest", "cursor fields must be non-negative integers")
        return cls(ts, idx)


@dataclass(frozen=True)
class PullResponse:
    records: tuple = ()

    def to_json(self, cluster: ClusterSpec) -> dict:
        return {"type": "records", "records": [record_to_json(r, cluster) for r in self.records]}

    @classmethod
    def from_json(cls, obj, cluster: ClusterSpec) -> "PullResponse":
        """Decode a response; individual records that fail to decode are dropped."""
        if not isinstance(obj, dict) or obj.get("type") != "records":
            raise WireError("BadResponse", "not a records response")
        items = obj.get("records")
        if not isinstance(items, list):
            raise WireError("BadResponse", "records must be a list")
        records = []
        for item in items:
            try:
                records.append(record_from_json(item, cluster))
            except WireError as exc:
                log.debug("dropping undecodable record: %s", exc)
        return cls(tuple(records))


def error_reply(code: str) -> dict:
    return {"type": "error", "code": code}


def select_peer(neighbors: Sequence[str], rng) -> str:
    if not neighbors:
        raise NoPeers("no neighbors to gossip with")
    return neighbors[rng.randrange(len(neighbors))]


def build_pull_request(cursor: PeerCursor) -> PullRequest:
    return PullRequest(cursor.last_timestamp, cursor.last_timestamp_index)


def handle_pull_request(store: StateStore, req: PullRequest, cfg: GossipConfig) -> PullResponse:
    records = store.records_after(req.last_timestamp, req.last_timestamp_index, cfg.batch_limit)
    return PullResponse(tuple(records))


def handle_pull_response(
    store: StateStore, cursor: PeerCursor, records: Sequence[RecordModel]
) -> tuple[list[AppendOutcome], PeerCursor]:
    """Apply a batch of records pulled from ``cursor.peer_id``.

    The cursor moves to the last record of the sorted batch even when that
    record was rejected, so a peer serving garbage cannot pin it.  It never
    moves backwards (a late duplicate response is harmless).
    """
    if not records:
        return [], cursor
    ordered = sorted(records, key=_order_key)
    outcomes = [store.append_remote(r) for r in ordered]
    last = ordered[-1]
    stamp = max(cursor.stamp, (last.timestamp, last.timestamp_index))
    return outcomes, PeerCursor(cursor.peer_id, *stamp)


def _order_key(record):
    key = (record.timestamp, record.timestamp_index, record.hash)
    if not all(map(_is_int, key[:2])) or not isinstance(key[2], str):
        # hostile in-process records with junk stamps sort first
        return (-1, -1, "")
    return key


def next_delay(cfg: GossipConfig, rng) -> int:
    return rng.randint(cfg.min_interval_ms, cfg.max_interval_ms)


def round_targets(cfg: GossipConfig, rng) -> list[str]:
    if cfg.mode is GossipMode.ALL_PEERS:
        if not cfg.neighbors:
            raise NoPeers("no neighbors to gossip with")
        return list(cfg.neighbors)
    return [select_peer(cfg.neighbors, rng)]


@dataclass
class ExchangeResult:
    peer_id: str
    ok: bool
    outcomes: list = field(default_factory=list)
    cursor_before: tuple = (0, 0)
    cursor_after: tuple = (0, 0)
    error: Optional[str] = None


@dataclass
class RoundSummary:
    exchanges: list = field(default_factory=list)

    @property
    def failed(self) -> list:
        return [e for e in self.exchanges if not e.ok]


class GossipNode:
    """A store plus the per-peer cursors that drive its pull loop."""

    def __init__(self, store: StateStore, cfg: GossipConfig):
        self.store = store
        self.cfg = cfg
        self.cursors: dict[str, PeerCursor] = {}

    def cursor(self, peer_id: str) -> PeerCursor:
        return self.cursors.get(peer_id) or PeerCursor(peer_id)

    def apply_response(self, peer_id: str, records) -> list[AppendOutcome]:
        outcomes, cursor = handle_pull_response(self.store, self.cursor(peer_id), records)
        self.cursors[peer_id] = cursor
        return outcomes


Exchange = Callable[[str, PullRequest], Sequence[RecordModel]]


def run_round(node: GossipNode, rng, exchange: Exchange, lock=None) -> RoundSummary:
    """One gossip round: pull from one neighbor, or from all of them in ALL_PEERS mode.

    ``exchange(peer_id, request)`` performs the network round trip and raises
    ``PeerUnavailable`` on failure.  If ``lock`` is given it is held only while
    the store is touched, never across the exchange.
    """
    summary = RoundSummary()
    for peer_id in round_targets(node.cfg, rng):
        before = node.cursor(peer_id)
        request = build_pull_request(before)
        try:
            records = exchange(peer_id, request)
        except PeerUnavailable as exc:
            summary.exchanges.append(ExchangeResult(
                peer_id, False, cursor_before=before.stamp, cursor_after=before.stamp,
                error=str(exc)))
            continue
        if lock is None:
            outcomes = node.apply_response(peer_id, records)
        else:
            with lock:
                outcomes = node.apply_response(peer_id, records)
        summary.exchanges.append(ExchangeResult(
            peer_id, True, outcomes, before.stamp, node.cursor(peer_id).stamp))
    return summary
