"""Regenerate the golden wire frames from the oracle module alone.

    python3 tests/fixtures/make_fixtures.py

Cluster members hold private keys 1, 2 and 3.
"""
import json
import struct
import sys
from pathlib import Path

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent))

import oracles  # noqa: E402

PRIVATE = (1, 2, 3)


def pub(k):
    return oracles.compress(oracles.lib_base_mult(k))


MEMBERS = sorted(pub(k) for k in PRIVATE)


def bitmap(keys):
    return sum(1 << (len(MEMBERS) - 1 - MEMBERS.index(k)) for k in keys)


def frame(obj):
    payload = json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode()
    return struct.pack(">I", len(payload)) + payload


def record(key, value, version, signers, multisig, ts, idx, created):
    h_hex = oracles.record_digest(key, value, version)
    h = int(h_hex, 16) % oracles.N
    if multisig:
        total = sum(k * h for k in signers) % oracles.N
        point = None
        for k in signers:
            point = oracles.affine_add(point, oracles.affine_mult(h, oracles.lib_base_mult(k)))
        sigs = {oracles.compress(point): f"{total:064x}"}
    else:
        sigs = {pub(k): f"{k * h % oracles.N:064x}" for k in sorted(signers, key=pub)}
    return {
        "hash": h_hex,
        "key": key,
        "value": value,
        "version": version,
        "signatureType": "MULTISIG" if multisig else "INTERMEDIATE",
        "signatures": sigs,
        "publicKeysBitmap": bitmap([pub(k) for k in signers]),
        "timestamp": ts,
        "timestampIndex": idx,
        "createdAt": created,
    }


FRAMES = {
    "pull_request.bin": {"type": "pull", "lastTimestamp": 1700000000000, "lastTimestampIndex": 3},
    "pull_response.bin": {"type": "records", "records": [
        record("alpha", "one", 1, [2], False, 1700000000001, 0, 1700000000001),
        record("beta", "twö", 2, [1, 3], True, 1700000000002, 1, 1700000000000),
    ]},
    "append.bin": {"type": "append", "key": "alpha", "value": "one", "version": 1},
}

if __name__ == "__main__":
    for name, obj in FRAMES.items():
        (HERE / name).write_bytes(frame(obj))
    (HERE / "members.json").write_text(json.dumps(MEMBERS, indent=1) + "\n")
