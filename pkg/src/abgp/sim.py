"""Deterministic discrete-event simulation of an abgp cluster.

Everything runs on a virtual millisecond clock.  The network may drop,
duplicate and delay messages; nodes may crash or turn Byzantine.  All random
choices come from generators forked off the scenario seed by fixed labels, so
identical configs give identical reports and changing one probability does not
disturb the streams of unrelated subsystems.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import heapq
import itertools
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from . import crypto
from .crypto import KeyPair, scalar_hex
from .errors import ConfigError, NoPeers
from .gossip import (
    GossipConfig,
    GossipMode,
    GossipNode,
    build_pull_request,
    handle_pull_request,
    next_delay,
    round_targets,
)
from .records import (
    ClusterSpec,
    RecordModel,
    SignatureType,
    Verdict,
    record_hash_hex,
    validate_record,
)
from .state import StateStore

log = logging.getLogger(__name__)

FULL_MESH = "FULL_MESH"


class FaultBehavior(str, enum.Enum):
    CRASHED = "CRASHED"
    FORGER = "FORGER"
    TAMPERER = "TAMPERER"


@dataclass(frozen=True)
class FaultSpec:
    node_index: int
    behavior: FaultBehavior
    start_ms: int = 0

    def __post_init__(self):
        object.__setattr__(self, "behavior", FaultBehavior(self.behavior))


@dataclass(frozen=True)
class ScriptedAppend:
    virtual_time_ms: int
    node_index: int
    key: str
    value: str
    version: int = 1

    @property
    def hash(self) -> str:
        return record_hash_hex(self.key, self.value, self.version)


@dataclass(frozen=True)
class SimConfig:
    seed: int
    node_count: int
    topology: Union[str, tuple] = FULL_MESH
    faults: tuple = ()
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0
    delay_ms_range: tuple = (1, 50)
    gossip: GossipConfig = GossipConfig()
    appends: tuple = ()
    max_virtual_time_ms: int = 10_000

    def __post_init__(self):
        if not isinstance(self.topology, str):
            object.__setattr__(self, "topology", tuple(tuple(n) for n in self.topology))
        object.__setattr__(self, "faults", tuple(self.faults))
        object.__setattr__(self, "appends", tuple(self.appends))
        object.__setattr__(self, "delay_ms_range", tuple(self.delay_ms_range))

    def validate(self) -> None:
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.node_count < 3:
            raise ConfigError("nodeCount must be >= 3")
        for name in ("drop_probability", "duplicate_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be within [0, 1]")
        lo, hi = self.delay_ms_range
        if not 0 <= lo <= hi:
            raise ConfigError("delayMsRange must satisfy 0 <= min <= max")
        if self.max_virtual_time_ms <= 0:
            raise ConfigError("maxVirtualTimeMs must be > 0")
        if self.topology != FULL_MESH:
            if isinstance(self.topology, str):
                raise ConfigError(f"unknown topology {self.topology!r}")
            if len(self.topology) != self.node_count:
                raise ConfigError("topology needs one neighbor list per node")
            for i, neighbors in enumerate(self.topology):
                for j in neighbors:
                    if not 0 <= j < self.node_count or j == i:
                        raise ConfigError(f"bad neighbor {j} for node {i}")
        for fault in self.faults:
            if not 0 <= fault.node_index < self.node_count:
                raise ConfigError(f"fault nodeIndex {fault.node_index} out of range")
        if len({f.node_index for f in self.faults}) != len(self.faults):
            raise ConfigError("at most one fault per node")
        for a in self.appends:
            if not 0 <= a.node_index < self.node_count:
                raise ConfigError(f"append nodeIndex {a.node_index} out of range")
            if a.virtual_time_ms < 0:
                raise ConfigError("append virtualTimeMs must be >= 0")

    def neighbors_of(self, i: int) -> list[int]:
        if self.topology == FULL_MESH:
            return [j for j in range(self.node_count) if j != i]
        return list(self.topology[i])

    @classmethod
    def from_json(cls, obj: dict) -> "SimConfig":
        try:
            g = obj.get("gossip", {})
            gossip = GossipConfig(
                min_interval_ms=g.get("minIntervalMs", 150),
                max_interval_ms=g.get("maxIntervalMs", 300),
                batch_limit=g.get("batchLimit", 10),
                mode=GossipMode(g.get("mode", "RANDOM_PEER")),
            )
            return cls(
                seed=obj["seed"],
                node_count=obj["nodeCount"],
                topology=obj.get("topology", FULL_MESH),
                faults=tuple(
                    FaultSpec(f["nodeIndex"], f["behavior"], f.get("startMs", 0))
                    for f in obj.get("faults", ())
                ),
                drop_probability=obj.get("dropProbability", 0.0),
                duplicate_probability=obj.get("duplicateProbability", 0.0),
                delay_ms_range=tuple(obj.get("delayMsRange", (1, 50))),
                gossip=gossip,
                appends=tuple(
                    ScriptedAppend(a["virtualTimeMs"], a["nodeIndex"], a["key"],
                                   a["value"], a.get("version", 1))
                    for a in obj.get("appends", ())
                ),
                max_virtual_time_ms=obj.get("maxVirtualTimeMs", 10_000),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scenario: {exc!r}") from exc

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "nodeCount": self.node_count,
            "topology": self.topology if isinstance(self.topology, str)
            else [list(n) for n in self.topology],
            "faults": [
                {"nodeIndex": f.node_index, "behavior": f.behavior.value, "startMs": f.start_ms}
                for f in self.faults
            ],
            "dropProbability": self.drop_probability,
            "duplicateProbability": self.duplicate_probability,
            "delayMsRange": list(self.delay_ms_range),
            "gossip": {
                "minIntervalMs": self.gossip.min_interval_ms,
                "maxIntervalMs": self.gossip.max_interval_ms,
                "batchLimit": self.gossip.batch_limit,
                "mode": self.gossip.mode.value,
            },
            "appends": [
                {"virtualTimeMs": a.virtual_time_ms, "nodeIndex": a.node_index,
                 "key": a.key, "value": a.value, "version": a.version}
                for a in self.appends
            ],
            "maxVirtualTimeMs": self.max_virtual_time_ms,
        }


@dataclass
class SimReport:
    converged: bool
    convergence_time_ms: Optional[int]
    per_node_root: list
    messages_sent: int = 0
    messages_dropped: int = 0
    messages_duplicated: int = 0
    rounds_executed: int = 0

    def to_json(self) -> dict:
        return {
            "converged": self.converged,
            "convergenceTimeMs": self.convergence_time_ms,
            "perNodeRoot": list(self.per_node_root),
            "messagesSent": self.messages_sent,
            "messagesDropped": self.messages_dropped,
            "messagesDuplicated": self.messages_duplicated,
            "roundsExecuted": self.rounds_executed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def fork_rng(seed: int, label: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def ring_with_chords(n: int, degree: int) -> tuple:
    """Symmetric circulant topology: node i links to i±1, ..., i±degree/2."""
    if degree % 2 or not 0 < degree < n:
        raise ValueError("degree must be even and smaller than n")
    offsets = range(1, degree // 2 + 1)
    return tuple(
        tuple(sorted({(i + o) % n for o in offsets} | {(i - o) % n for o in offsets}))
        for i in range(n)
    )


def apply_fault(behavior: FaultBehavior, records: Sequence[RecordModel], rng=None):
    """Transform an outbound pull response per the responder's fault behavior.

    Returns ``None`` for silence.
    """
    behavior = FaultBehavior(behavior)
    if behavior is FaultBehavior.CRASHED:
        return None
    if behavior is FaultBehavior.FORGER:
        forged_key = KeyPair.generate(rng)
        signer = forged_key.public_hex
        out = []
        for r in records:
            h = crypto.hash_to_scalar(bytes.fromhex(r.hash))
            out.append(dataclasses.replace(
                r,
                signature_type=SignatureType.INTERMEDIATE,
                signatures={signer: crypto.partial_sign(forged_key.private, h)},
                public_keys=(signer,),
                state_hash=None,
            ))
        return out
    return [dataclasses.replace(r, value="~" + r.value, state_hash=None) for r in records]


def check_convergence(stores: Iterable[StateStore], scripted_hashes: Iterable[str]) -> bool:
    """True iff every store holds every scripted hash as MULTISIG and all roots agree."""
    stores = list(stores)
    scripted = list(scripted_hashes)
    for store in stores:
        for h in scripted:
            record = store.get(h)
            if record is None or not record.is_multisig:
                return False
    return len({s.current_root() for s in stores}) <= 1


@dataclass
class _SimNode:
    index: int
    keys: KeyPair
    gossip: GossipNode
    rng: random.Random
    fault: Optional[FaultSpec] = None
    pending: set = field(default_factory=set)
    stopped: bool = False

    @property
    def store(self) -> StateStore:
        return self.gossip.store


class Simulation:
    """Event loop owning every simulated node; single-threaded by design."""

    def __init__(self, config: SimConfig):
        config.validate()
        self.config = config
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self._exchange_ids = itertools.count()
        self.net_rng = fork_rng(config.seed, "network")
        self.fault_rng = fork_rng(config.seed, "faults")
        key_rng = fork_rng(config.seed, "keys")
        keys = [KeyPair.generate(key_rng) for _ in range(config.node_count)]
        self.cluster = ClusterSpec.from_public_keys(k.public for k in keys)
        self.key_index = {k.public_hex: i for i, k in enumerate(keys)}
        faults = {f.node_index: f for f in config.faults}
        self.nodes: list[_SimNode] = []
        for i, kp in enumerate(keys):
            cfg = dataclasses.replace(
                config.gossip,
                neighbors=tuple(keys[j].public_hex for j in config.neighbors_of(i)),
            )
            cfg.check_connectivity(self.cluster)
            store = StateStore(self.cluster, kp, clock=self._clock)
            self.nodes.append(_SimNode(
                i, kp, GossipNode(store, cfg), fork_rng(config.seed, f"gossip:{i}"),
                faults.get(i)))
        self.scripted_hashes = sorted({a.hash for a in config.appends})
        self.last_append_ms = max((a.virtual_time_ms for a in config.appends), default=0)
        self.timeout_ms = max(1, 4 * config.delay_ms_range[1])
        self.report = SimReport(False, None, [])

    def _clock(self) -> int:
        return self.now

    @property
    def honest(self) -> list[_SimNode]:
        return [n for n in self.nodes if n.fault is None]

    def _faulty(self, node: _SimNode) -> Optional[FaultBehavior]:
        if node.fault is not None and self.now >= node.fault.start_ms:
            return node.fault.behavior
        return None

    def _crashed(self, node: _SimNode) -> bool:
        return self._faulty(node) is FaultBehavior.CRASHED

    def _schedule(self, at: int, fn, *args) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), fn, args))

    def _send(self, fn, *args) -> None:
        # fixed number of draws per message keeps the stream aligned across settings
        drop = self.net_rng.random() < self.config.drop_probability
        dup = self.net_rng.random() < self.config.duplicate_probability
        lo, hi = self.config.delay_ms_range
        d1, d2 = self.net_rng.randint(lo, hi), self.net_rng.randint(lo, hi)
        self.report.messages_sent += 1
        if drop:
            self.report.messages_dropped += 1
            return
        self._schedule(self.now + d1, fn, *args)
        if dup:
            self.report.messages_duplicated += 1
            self._schedule(self.now + d2, fn, *args)

    def _start_round(self, node: _SimNode) -> None:
        if self._crashed(node):
            node.stopped = True
            return
        try:
            targets = round_targets(node.gossip.cfg, node.rng)
        except NoPeers:
            node.stopped = True
            return
        self.report.rounds_executed += 1
        for peer_hex in targets:
            xid = next(self._exchange_ids)
            node.pending.add(xid)
            request = build_pull_request(node.gossip.cursor(peer_hex))
            self._send(self._deliver_request, node.index, self.key_index[peer_hex], xid, request)
            self._schedule(self.now + self.timeout_ms, self._exchange_done, node.index, xid)

    def _exchange_done(self, index: int, xid: int) -> None:
        node = self.nodes[index]
        if xid not in node.pending:
            return
        node.pending.discard(xid)
        if not node.pending:
            self._schedule(self.now + next_delay(node.gossip.cfg, node.rng),
                           self._start_round, node)

    def _deliver_request(self, src: int, dst: int, xid: int, request) -> None:
        responder = self.nodes[dst]
        behavior = self._faulty(responder)
        if behavior is FaultBehavior.CRASHED:
            return
        records = handle_pull_request(responder.store, request, responder.gossip.cfg).records
        if behavior is not None:
            records = apply_fault(behavior, records, self.fault_rng)
        self._send(self._deliver_response, dst, src, xid, tuple(records))

    def _deliver_response(self, src: int, dst: int, xid: int, records) -> None:
        node = self.nodes[dst]
        if self._crashed(node):
            return
        node.gossip.apply_response(self.nodes[src].keys.public_hex, records)
        self._exchange_done(dst, xid)
        self._check()

    def _do_append(self, append: ScriptedAppend) -> None:
        node = self.nodes[append.node_index]
        if self._crashed(node):
            log.info("append %s skipped: node %d is down", append.key, node.index)
            return
        if append.hash in node.store:
            log.info("append %s skipped: already stored on node %d", append.key, node.index)
            return
        node.store.append_local(append.key, append.value, append.version)
        self._check()

    def _check(self) -> None:
        if self.report.converged or self.now < self.last_append_ms:
            return
        if check_convergence((n.store for n in self.honest), self.scripted_hashes):
            self.report.converged = True
            self.report.convergence_time_ms = self.now

    def run(self) -> SimReport:
        for append in self.config.appends:
            self._schedule(append.virtual_time_ms, self._do_append, append)
        for node in self.nodes:
            self._schedule(next_delay(node.gossip.cfg, node.rng), self._start_round, node)
        horizon = self.config.max_virtual_time_ms
        while self._queue and not self.report.converged:
            at, _, fn, args = heapq.heappop(self._queue)
            if at > horizon:
                break
            self.now = at
            fn(*args)
        self.report.per_node_root = [scalar_hex(n.store.current_root()) for n in self.honest]
        return self.report

    def safety_violations(self) -> list[str]:
        """Problems that must never occur in honest stores, whatever the faults."""
        problems = []
        seen = {}
        for node in self.honest:
            for record in node.store.records.values():
                verdict = validate_record(record, self.cluster)
                if verdict is not Verdict.OK:
                    problems.append(f"node {node.index} holds {record.hash}: {verdict.value}")
                content = (record.key, record.value, record.version)
                if seen.setdefault(record.hash, content) != content:
                    problems.append(f"conflicting content under {record.hash}")
            if not node.store.replay_validate():
                problems.append(f"node {node.index} fails replay validation")
        return problems


def run_simulation(config: SimConfig) -> SimReport:
    return Simulation(config).run()
