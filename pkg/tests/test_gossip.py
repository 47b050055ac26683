import dataclasses
import logging
import random
from collections import Counter

import pytest

from abgp import crypto
from abgp.errors import NoPeers, PeerUnavailable, WireError
from abgp.gossip import (
    GossipConfig,
    GossipMode,
    GossipNode,
    PeerCursor,
    PullRequest,
    PullResponse,
    build_pull_request,
    handle_pull_request,
    handle_pull_response,
    next_delay,
    run_round,
    select_peer,
)
from abgp.state import Outcome, StateStore
from conftest import FakeClock, make_cluster, make_keys


def filled_store(cluster, keys, clock, n):
    store = StateStore(cluster, keys, clock)
    for i in range(n):
        clock.advance()
        store.append_local(f"k{i}", "v", 1)
    return store


class TestSelectPeer:
    def test_single(self):
        assert select_peer(["a"], random.Random(1)) == "a"

    def test_empty(self):
        with pytest.raises(NoPeers):
            select_peer([], random.Random(1))

    def test_deterministic(self):
        peers = list("abcd")

        def sequence():
            rng = random.Random(99)
            return [select_peer(peers, rng) for _ in range(20)]

        assert sequence() == sequence()

    def test_uniform(self):
        peers = list("abcd")
        rng = random.Random(2024)
        draws = 10_000
        counts = Counter(select_peer(peers, rng) for _ in range(draws))
        expected = draws / 4
        sd = (draws * 0.25 * 0.75) ** 0.5
        assert all(abs(counts[p] - expected) <= 4 * sd for p in peers)
        chi2 = sum((counts[p] - expected) ** 2 / expected for p in peers)
        assert chi2 < 16.27  # p = 0.001 critical value, 3 degrees of freedom


class TestNextDelay:
    def test_degenerate(self):
        assert next_delay(GossipConfig(150, 150), random.Random(0)) == 150

    def test_bounds(self):
        rng = random.Random(3)
        delays = [next_delay(GossipConfig(150, 300), rng) for _ in range(1000)]
        assert min(delays) >= 150 and max(delays) <= 300
        assert min(delays) < 160 and max(delays) > 290

    def test_deterministic(self):
        cfg = GossipConfig(150, 300)
        a, b = random.Random(7), random.Random(7)
        assert [next_delay(cfg, a) for _ in range(50)] == [next_delay(cfg, b) for _ in range(50)]


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(min_interval_ms=10, max_interval_ms=5), dict(batch_limit=0), dict(mode="SOMETIMES")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GossipConfig(**kwargs)

    def test_low_connectivity_warns(self, cluster3, keys3, caplog):
        cfg = GossipConfig(neighbors=(keys3[1].public_hex,))
        with caplog.at_level(logging.WARNING):
            assert cfg.check_connectivity(make_cluster(make_keys(5))) is False
        assert "neighbors" in caplog.text
        assert GossipConfig(neighbors=("a", "b")).check_connectivity(cluster3)


class TestPullRequest:
    def test_fresh_peer(self):
        assert build_pull_request(PeerCursor("p")) == PullRequest(0, 0)

    def test_passthrough(self):
        assert build_pull_request(PeerCursor("p", 1653722582280, 0)) == PullRequest(1653722582280, 0)

    def test_json(self):
        req = PullRequest(5, 2)
        assert req.to_json() == {"type": "pull", "lastTimestamp": 5, "lastTimestampIndex": 2}
        assert PullRequest.from_json(req.to_json()) == req

    @pytest.mark.parametrize("obj", [
        {"type": "pull"}, {"type": "pull", "lastTimestamp": -1, "lastTimestampIndex": 0},
        {"type": "pull", "lastTimestamp": "1", "lastTimestampIndex": 0},
        {"type": "push", "lastTimestamp": 1, "lastTimestampIndex": 0}, [],
    ])
    def test_malformed(self, obj):
        with pytest.raises(WireError):
            PullRequest.from_json(obj)


class TestHandlePullRequest:
    def test_empty(self, stores3):
        assert handle_pull_request(stores3[0], PullRequest(), GossipConfig()).records == ()

    def test_all_ascending(self, keys3, cluster3, clock):
        store = filled_store(cluster3, keys3[0], clock, 3)
        got = handle_pull_request(store, PullRequest(), GossipConfig(batch_limit=10)).records
        assert [r.key for r in got] == ["k0", "k1", "k2"]

    def test_batch_limit(self, keys3, cluster3, clock):
        store = filled_store(cluster3, keys3[0], clock, 25)
        got = handle_pull_request(store, PullRequest(), GossipConfig(batch_limit=10)).records
        assert [r.key for r in got] == [f"k{i}" for i in range(10)]


class TestHandlePullResponse:
    def test_empty(self, stores3):
        cursor = PeerCursor("p", 4, 1)
        assert handle_pull_response(stores3[0], cursor, []) == ([], cursor)

    def test_cursor_moves_to_last(self, keys3, cluster3, clock):
        source = filled_store(cluster3, keys3[0], clock, 2)
        recs = [dataclasses.replace(r, timestamp=ts, timestamp_index=0)
                for r, ts in zip(source.records.values(), (11, 10))]
        store = StateStore(cluster3, keys3[1], clock)
        outcomes, cursor = handle_pull_response(store, PeerCursor("p"), recs)
        assert cursor.stamp == (11, 0)
        assert all(o.kind is not Outcome.IGNORED for o in outcomes)

    def test_forged_last_record_still_advances(self, keys3, cluster3, clock):
        source = filled_store(cluster3, keys3[0], clock, 2)
        good, bad = source.records.values()
        good = dataclasses.replace(good, timestamp=10, timestamp_index=0)
        forger = crypto.KeyPair.from_private(31337)
        h = crypto.hash_to_scalar(bytes.fromhex(bad.hash))
        sig = {forger.public_hex: crypto.partial_sign(forger.private, h)}
        bad = dataclasses.replace(bad, timestamp=12, timestamp_index=0,
                                  signatures=sig, public_keys=tuple(sig))
        store = StateStore(cluster3, keys3[2], clock)
        outcomes, cursor = handle_pull_response(store, PeerCursor("p"), [bad, good])
        assert [o.kind for o in outcomes] == [Outcome.PROMOTED_TO_MULTISIG, Outcome.IGNORED]
        assert outcomes[1].reason == "UnknownSigner"
        assert cursor.stamp == (12, 0)
        assert bad.hash not in store

    def test_never_moves_backwards(self, keys3, cluster3, clock):
        source = filled_store(cluster3, keys3[0], clock, 1)
        (rec,) = source.records.values()
        stale = dataclasses.replace(rec, timestamp=40, timestamp_index=3)
        store = StateStore(cluster3, keys3[1], clock)
        _, cursor = handle_pull_response(store, PeerCursor("p", 50, 0), [stale])
        assert cursor.stamp == (50, 0)


class TestResponseJson:
    def test_round_trip(self, keys3, cluster3, clock):
        store = filled_store(cluster3, keys3[0], clock, 3)
        resp = handle_pull_request(store, PullRequest(), GossipConfig())
        assert PullResponse.from_json(resp.to_json(cluster3), cluster3) == resp

    def test_bad_records_dropped(self, keys3, cluster3, clock):
        store = filled_store(cluster3, keys3[0], clock, 2)
        obj = handle_pull_request(store, PullRequest(), GossipConfig()).to_json(cluster3)
        obj["records"].append({"junk": True})
        assert len(PullResponse.from_json(obj, cluster3).records) == 2

    @pytest.mark.parametrize("obj", [{"type": "records"}, {"type": "error"}, None])
    def test_malformed(self, cluster3, obj):
        with pytest.raises(WireError):
            PullResponse.from_json(obj, cluster3)


class _InMemoryCluster:
    """Synchronous in-memory exchanges between gossip nodes."""

    def __init__(self, n, mode=GossipMode.RANDOM_PEER, batch_limit=10, seed=0):
        self.keys = make_keys(n, seed)
        self.cluster = make_cluster(self.keys)
        self.clock = FakeClock()
        self.by_key = {}
        self.nodes = []
        for kp in self.keys:
            cfg = GossipConfig(batch_limit=batch_limit, mode=mode, neighbors=tuple(
                k.public_hex for k in self.keys if k is not kp))
            node = GossipNode(StateStore(self.cluster, kp, self.clock), cfg)
            self.nodes.append(node)
            self.by_key[kp.public_hex] = node
        self.down = set()
        self.log = []

    def exchange(self, peer_id, request):
        if peer_id in self.down:
            raise PeerUnavailable("timeout")
        node = self.by_key[peer_id]
        resp = handle_pull_request(node.store, request, node.cfg)
        self.log.append((peer_id, resp))
        return resp.records


class TestRunRound:
    def test_random_peer_one_exchange(self):
        c = _InMemoryCluster(4)
        summary = run_round(c.nodes[0], random.Random(1), c.exchange)
        assert len(summary.exchanges) == 1 and not summary.failed

    def test_all_peers(self):
        c = _InMemoryCluster(4, mode=GossipMode.ALL_PEERS)
        summary = run_round(c.nodes[0], random.Random(1), c.exchange)
        assert len(summary.exchanges) == 3

    def test_unreachable_peer(self):
        c = _InMemoryCluster(4, mode=GossipMode.ALL_PEERS)
        c.nodes[1].store.append_local("k", "v", 1)
        down = c.keys[1].public_hex
        c.down.add(down)
        node = c.nodes[0]
        summary = run_round(node, random.Random(1), c.exchange)
        assert [e.peer_id for e in summary.failed] == [down]
        assert node.cursor(down).stamp == (0, 0)
        assert len(summary.exchanges) == 3
        assert len(node.store) == 0

    def test_cursor_safety(self):
        c = _InMemoryCluster(3, batch_limit=4)
        src, dst = c.nodes[0], c.nodes[1]
        for i in range(9):
            c.clock.advance()
            src.store.append_local(f"k{i}", "v", 1)
        peer = c.keys[0].public_hex
        seen = []
        for _ in range(4):
            records = c.exchange(peer, build_pull_request(dst.cursor(peer)))
            seen.extend(r.hash for r in records)
            dst.apply_response(peer, records)
        assert len(seen) == len(set(seen)) == 9

    def test_replayed_response_is_harmless(self):
        c = _InMemoryCluster(5)
        for i in range(4):
            c.nodes[i].store.append_local(f"k{i}", "v", 1)
        rng = random.Random(5)
        for _ in range(40):
            c.clock.advance()
            run_round(rng.choice(c.nodes), rng, c.exchange)
        target = c.nodes[4]
        for peer_id, resp in list(c.log):
            target.apply_response(peer_id, resp.records)
            state = (dict(target.store.records), target.store.root)
            target.apply_response(peer_id, resp.records)
            assert (dict(target.store.records), target.store.root) == state

    def test_progress_and_bandwidth(self):
        c = _InMemoryCluster(5, batch_limit=3, seed=9)
        hashes = []
        rng = random.Random(9)
        for i in range(12):
            hashes.append(c.nodes[i % 5].store.append_local(f"k{i}", "v", 1).hash)
        for step in range(600):
            c.clock.advance(3)
            run_round(c.nodes[step % 5], rng, c.exchange)
            if all(n.store.get(h) is not None and n.store.get(h).is_multisig
                   for n in c.nodes for h in hashes):
                break
        else:
            pytest.fail("cluster did not converge")
        assert all(len(resp.records) <= 3 for _, resp in c.log)
        assert len({n.store.current_root() for n in c.nodes}) == 1

    def test_cursor_never_exceeds_received(self):
        c = _InMemoryCluster(4, seed=2)
        rng = random.Random(2)
        greatest = {}
        for i in range(6):
            c.nodes[i % 4].store.append_local(f"k{i}", "v", 1)
        for step in range(200):
            c.clock.advance(2)
            node = c.nodes[rng.randrange(4)]
            before = len(c.log)
            run_round(node, rng, c.exchange)
            for peer_id, resp in c.log[before:]:
                for r in resp.records:
                    key = (id(node), peer_id)
                    greatest[key] = max(greatest.get(key, (0, 0)), r.stamp)
            for peer_id, cursor in node.cursors.items():
                assert cursor.stamp <= greatest.get((id(node), peer_id), (0, 0))
