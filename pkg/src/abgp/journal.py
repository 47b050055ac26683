"""Append-only JSON-lines journal of store mutations."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from pathlib import Path
from typing import Iterator

from .crypto import scalar_from_hex, scalar_hex
from .errors import WireError
from .records import ClusterSpec, RecordModel, record_from_json, record_to_json

log = logging.getLogger(__name__)


class Journal:
    """One line per stored-record mutation; the last line for a hash wins."""

    def __init__(self, path, cluster: ClusterSpec, *, fsync: bool = False):
        self.path = Path(path)
        self.cluster = cluster
        self.fsync = fsync
        self._fh = None

    def append(self, record: RecordModel) -> None:
        if self._fh is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        line = record_to_json(record, self.cluster)
        if record.state_hash is not None:
            line["stateHash"] = scalar_hex(record.state_hash)
        self._fh.write(json.dumps(line, separators=(",", ":"), ensure_ascii=False) + "\n")
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    __call__ = append

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def replay(self) -> Iterator[RecordModel]:
        """Yield journaled records in file order.

        A torn final line (crash mid-write) is skipped with a warning; a bad
        line anywhere else raises ``WireError``.
        """
        if not self.path.exists():
            return
        with open(self.path, encoding="utf-8") as fh:
            lines = fh.readlines()
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                record = record_from_json(obj, self.cluster)
                state_hash = obj.get("stateHash")
                if state_hash is not None:
                    record = dataclasses.replace(record, state_hash=scalar_from_hex(state_hash))
            except (ValueError, WireError) as exc:
                if lineno == len(lines) and not line.endswith("\n"):
                    log.warning("skipping torn journal tail in %s", self.path)
                    return
                raise WireError("BadJournal", f"{self.path}:{lineno}: {exc}") from exc
            yield record
