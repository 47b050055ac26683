"""Runnable TCP node: config loading, framed JSON transport, journal, client calls."""
from __future__ import annotations

import json
import logging
import random
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional
from urllib.parse import urlparse

from .crypto import CurvePoint, KeyPair, scalar_from_hex, scalar_hex
from .errors import ConfigError, DuplicateRecord, InvalidPoint, PeerUnavailable, WireError
from .gossip import (
    GossipConfig,
    GossipMode,
    GossipNode,
    PullRequest,
    PullResponse,
    error_reply,
    handle_pull_request,
    next_delay,
    run_round,
)
from .journal import Journal
from .records import ClusterSpec, _is_int
from .state import StateStore, wall_clock_ms

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 4 * 1024 * 1024
DEFAULT_TIMEOUT = 2.0


# -- framing ---------------------------------------------------------------

def encode_message(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def decode_message(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise WireError("BadJson", str(exc)) from None
    if not isinstance(obj, dict) or not isinstance(obj.get("type"), str):
        raise WireError("BadMessage", "message must be an object with a string 'type'")
    return obj


def encode_frame(obj: dict) -> bytes:
    payload = encode_message(obj)
    if len(payload) > MAX_FRAME:
        raise WireError("FrameTooLarge", f"{len(payload)} bytes")
    return HEADER.pack(len(payload)) + payload


def _recv_exactly(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 65536))
        if not chunk:
            raise WireError("ShortRead", f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    """Read one frame's payload; the length is checked before the payload is read."""
    (length,) = HEADER.unpack(_recv_exactly(sock, HEADER.size))
    if length > MAX_FRAME:
        raise WireError("FrameTooLarge", f"{length} bytes announced")
    return _recv_exactly(sock, length)


def send_frame(sock: socket.socket, obj: dict) -> None:
    sock.sendall(encode_frame(obj))


def request(address: str, obj: dict, timeout: float = DEFAULT_TIMEOUT) -> dict:
    """One connection, one request frame, one reply frame."""
    host, port = parse_host_port(address)
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            send_frame(sock, obj)
            return decode_message(read_frame(sock))
    except (OSError, WireError) as exc:
        raise PeerUnavailable(f"{address}: {exc}") from exc


def parse_host_port(address: str) -> tuple[str, int]:
    if "://" in address:
        parsed = urlparse(address)
        host, port = parsed.hostname, parsed.port
    else:
        host, _, port = address.rpartition(":")
    try:
        port = int(port)
    except (TypeError, ValueError):
        raise ConfigError(f"bad address {address!r}") from None
    if not host:
        raise ConfigError(f"bad address {address!r}")
    return host, port


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class PeerConfig:
    public_key: str
    address: Optional[str] = None


@dataclass(frozen=True)
class NodeConfig:
    private_key: int
    public_key: str
    listen_address: str
    peers: tuple
    min_gossip_interval_ms: int = 150
    max_gossip_interval_ms: int = 300
    proof_expiration_ms: Optional[int] = None  # parsed and reported, drives nothing
    batch_limit: int = 10
    gossip_mode: GossipMode = GossipMode.RANDOM_PEER
    journal_path: Optional[str] = None
    reduced_timestamp_index: bool = False
    cluster: ClusterSpec = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        members = [self.public_key] + [p.public_key for p in self.peers]
        try:
            object.__setattr__(self, "cluster", ClusterSpec(tuple(members)))
        except (ValueError, InvalidPoint) as exc:
            raise ConfigError(f"peers: {exc}") from exc

    @property
    def keys(self) -> KeyPair:
        return KeyPair.from_private(self.private_key)

    def gossip_config(self) -> GossipConfig:
        return GossipConfig(
            min_interval_ms=self.min_gossip_interval_ms,
            max_interval_ms=self.max_gossip_interval_ms,
            batch_limit=self.batch_limit,
            mode=self.gossip_mode,
            neighbors=tuple(p.public_key for p in self.peers if p.address),
        )

    @property
    def peer_addresses(self) -> dict:
        return {p.public_key: p.address for p in self.peers if p.address}

    @classmethod
    def from_json(cls, obj) -> "NodeConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")

        def need(name, kind=None):
            if name not in obj:
                raise ConfigError(f"missing field {name!r}")
            value = obj[name]
            if kind is int and not _is_int(value):
                raise ConfigError(f"field {name!r} must be an integer")
            if kind is str and not isinstance(value, str):
                raise ConfigError(f"field {name!r} must be a string")
            return value

        try:
            private = scalar_from_hex(need("privateKey", str).lower())
        except ValueError as exc:
            raise ConfigError(f"field 'privateKey': {exc}") from None
        if private == 0:
            raise ConfigError("field 'privateKey' must be nonzero")
        public = need("publicKey", str).lower()
        if KeyPair.from_private(private).public_hex != public:
            raise ConfigError("field 'publicKey' does not match 'privateKey'")

        peers = []
        seen = {public}
        raw_peers = need("peers")
        if not isinstance(raw_peers, list):
            raise ConfigError("field 'peers' must be a list")
        for i, p in enumerate(raw_peers):
            if not isinstance(p, dict) or not isinstance(p.get("publicKey"), str):
                raise ConfigError(f"field 'peers[{i}].publicKey' missing")
            key = p["publicKey"].lower()
            try:
                CurvePoint.from_hex(key)
            except InvalidPoint as exc:
                raise ConfigError(f"field 'peers[{i}].publicKey': {exc}") from None
            if key in seen:
                raise ConfigError(f"field 'peers[{i}].publicKey' duplicates another member")
            seen.add(key)
            address = p.get("address")
            if address is not None:
                _address_field(f"peers[{i}].address", address)
            peers.append(PeerConfig(key, address))

        listen = _address_field("listenAddress", need("listenAddress", str))
        lo = need("minGossipIntervalMs", int)
        hi = need("maxGossipIntervalMs", int)
        if not 0 <= lo <= hi:
            raise ConfigError("field 'maxGossipIntervalMs' must be >= 'minGossipIntervalMs' >= 0")
        batch = obj.get("batchLimit", 10)
        if not _is_int(batch) or batch < 1:
            raise ConfigError("field 'batchLimit' must be a positive integer")
        expiration = obj.get("proofExpirationMs")
        if expiration is not None and not _is_int(expiration):
            raise ConfigError("field 'proofExpirationMs' must be an integer")
        try:
            mode = GossipMode(obj.get("gossipMode", "RANDOM_PEER"))
        except ValueError:
            raise ConfigError("field 'gossipMode' must be RANDOM_PEER or ALL_PEERS") from None
        journal = obj.get("journalPath")
        if journal is not None and not isinstance(journal, str):
            raise ConfigError("field 'journalPath' must be a string")
        return cls(
            private_key=private,
            public_key=public,
            listen_address=listen,
            peers=tuple(peers),
            min_gossip_interval_ms=lo,
            max_gossip_interval_ms=hi,
            proof_expiration_ms=expiration,
            batch_limit=batch,
            gossip_mode=mode,
            journal_path=journal,
            reduced_timestamp_index=bool(obj.get("reducedTimestampIndex", False)),
        )


def _address_field(name, value):
    if not isinstance(value, str):
        raise ConfigError(f"field {name!r} must be a string")
    try:
        parse_host_port(value)
    except ConfigError as exc:
        raise ConfigError(f"field {name!r}: {exc}") from None
    return value


def load_config(path) -> NodeConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return NodeConfig.from_json(obj)


# -- server ----------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        node: Node = self.server.node
        sock = self.request
        sock.settimeout(DEFAULT_TIMEOUT)
        try:
            payload = read_frame(sock)
        except WireError as exc:
            if exc.code == "FrameTooLarge":
                self._reply(error_reply(exc.code))
            return
        except OSError:
            return
        try:
            reply = node.dispatch(decode_message(payload))
        except WireError as exc:
            reply = error_reply(exc.code)
        self._reply(reply)

    def _reply(self, obj):
        try:
            send_frame(self.request, obj)
        except (OSError, WireError) as exc:
            log.debug("could not send reply: %s", exc)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Node:
    """A node process: framed listener plus the gossip loop thread."""

    def __init__(self, config: NodeConfig, *, clock=wall_clock_ms, seed=None):
        self.config = config
        self.cluster = config.cluster
        self.lock = threading.RLock()
        self.journal = Journal(config.journal_path, self.cluster) if config.journal_path else None
        keys = config.keys
        kwargs = dict(reduced_timestamp_index=config.reduced_timestamp_index, listener=self.journal)
        if self.journal is not None:
            store = StateStore.restore(self.journal.replay(), self.cluster, keys, clock, **kwargs)
            if not store.replay_validate():
                raise WireError("BadJournal", f"{config.journal_path} failed replay validation")
        else:
            store = StateStore(self.cluster, keys, clock, **kwargs)
        cfg = config.gossip_config()
        cfg.check_connectivity(self.cluster)
        self.gossip = GossipNode(store, cfg)
        self.rng = random.Random(seed)
        self._stop = threading.Event()
        self._server: Optional[_Server] = None
        self._threads: list[threading.Thread] = []

    @property
    def store(self) -> StateStore:
        return self.gossip.store

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def dispatch(self, msg: dict) -> dict:
        kind = msg.get("type")
        if kind == "pull":
            req = PullRequest.from_json(msg)
            with self.lock:
                resp = handle_pull_request(self.store, req, self.gossip.cfg)
                return resp.to_json(self.cluster)
        if kind == "append":
            key, value, version = msg.get("key"), msg.get("value"), msg.get("version")
            if not (isinstance(key, str) and isinstance(value, str)
                    and _is_int(version) and version >= 0):
                raise WireError("BadRequest", "append needs key, value and version")
            with self.lock:
                try:
                    record = self.store.append_local(key, value, version)
                except DuplicateRecord:
                    return error_reply("DuplicateRecord")
            return {"type": "appended", "hash": record.hash}
        if kind == "status":
            return self.status()
        raise WireError("UnknownType", str(kind))

    def status(self) -> dict:
        with self.lock:
            records = list(self.store.records.values())
            return {
                "type": "status",
                "publicKey": self.config.public_key,
                "root": scalar_hex(self.store.current_root()),
                "recordCount": len(records),
                "confirmedCount": sum(r.is_multisig for r in records),
                "peerCursors": {
                    p: [c.last_timestamp, c.last_timestamp_index]
                    for p, c in sorted(self.gossip.cursors.items())
                },
                "proofExpirationMs": self.config.proof_expiration_ms,
            }

    def _exchange(self, peer_id: str, req: PullRequest):
        address = self.config.peer_addresses[peer_id]
        reply = request(address, req.to_json())
        if reply.get("type") == "error":
            raise PeerUnavailable(f"{address}: error {reply.get('code')}")
        try:
            return PullResponse.from_json(reply, self.cluster).records
        except WireError as exc:
            raise PeerUnavailable(f"{address}: {exc}") from exc

    def _gossip_loop(self):
        cfg = self.gossip.cfg
        if not cfg.neighbors:
            log.warning("no peer addresses configured; gossip loop idle")
            return
        while not self._stop.is_set():
            summary = run_round(self.gossip, self.rng, self._exchange, lock=self.lock)
            for failed in summary.failed:
                log.info("exchange with %s failed: %s", failed.peer_id[:16], failed.error)
            self._stop.wait(next_delay(cfg, self.rng) / 1000)

    def start(self) -> "Node":
        host, port = parse_host_port(self.config.listen_address)
        self._server = _Server((host, port), _Handler)
        self._server.node = self
        self._stop.clear()
        self._threads = [
            threading.Thread(target=self._server.serve_forever, name="abgp-listener", daemon=True),
            threading.Thread(target=self._gossip_loop, name="abgp-gossip", daemon=True),
        ]
        for t in self._threads:
            t.start()
        log.info("node %s listening on %s", self.config.public_key[:16], self.address)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        for t in self._threads:
            t.join(timeout=5)
        if self.journal is not None:
            self.journal.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(config: NodeConfig) -> None:
    """Run a node until interrupted."""
    node = Node(config).start()
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        node.stop()


# -- client ----------------------------------------------------------------

def _checked(reply: dict, expected: str) -> dict:
    if reply.get("type") == "error":
        if reply.get("code") == "DuplicateRecord":
            raise DuplicateRecord("record already stored on the node")
        raise WireError(str(reply.get("code")), "node returned an error")
    if reply.get("type") != expected:
        raise WireError("BadReply", f"expected {expected!r}, got {reply.get('type')!r}")
    return reply


def cmd_append(node_address: str, key: str, value: str, version: int) -> str:
    reply = request(node_address, {"type": "append", "key": key, "value": value, "version": version})
    return _checked(reply, "appended")["hash"]


def cmd_status(node_address: str) -> dict:
    return _checked(request(node_address, {"type": "status"}), "status")
