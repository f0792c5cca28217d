"""Per-link key store held by a local KMS.

Each endpoint of a QKD link owns one store; both are fed the same
``(key_id, bytes)`` pairs. A block moves available -> reserved -> consumed
(a reservation may also be released back to available). Consumed blocks are
zeroised in memory.

When a journal path is given, every mutation is appended as one JSON line
and the store can be rebuilt from the journal after a restart. Blocks that
were reserved but never consumed at crash time come back as available:
reservation alone never hands key material out.
"""
from __future__ import annotations

import base64
import json
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from qkdnet.kms.errors import KeyIdConflict, KmsError, StoreFull

AVAILABLE = "available"
RESERVED = "reserved"
CONSUMED = "consumed"

DEFAULT_QUOTA = 1_000_000


@dataclass
class KeyBlock:
    key_id: bytes
    data: bytearray
    link_id: str
    created_at: float = 0.0
    status: str = AVAILABLE
    usage: Optional[str] = None

    def zeroize(self) -> None:
        for i in range(len(self.data)):
            self.data[i] = 0


class KeyStore:
    def __init__(self, link_id: str, node: str, quota: int = DEFAULT_QUOTA, journal: Optional[os.PathLike] = None):
        self.link_id = link_id
        self.node = node
        self.quota = quota
        self._blocks: dict[bytes, KeyBlock] = {}
        self._available: OrderedDict[bytes, None] = OrderedDict()
        self._lock = threading.RLock()
        self._journal_path = Path(journal) if journal is not None else None
        self._journal = None
        if self._journal_path is not None:
            if self._journal_path.exists():
                self._replay(self._journal_path)
            self._journal = open(self._journal_path, "a", encoding="utf-8")

    # -- persistence ---------------------------------------------------
    def _log(self, record: dict) -> None:
        if self._journal is not None:
            self._journal.write(json.dumps(record, separators=(",", ":")) + "\n")
            self._journal.flush()
            os.fsync(self._journal.fileno())

    def _replay(self, path: Path) -> None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kid = bytes.fromhex(rec["id"])
                op = rec["op"]
                if op == "push":
                    data = bytearray(base64.b64decode(rec["data"]))
                    self._blocks[kid] = KeyBlock(kid, data, self.link_id, rec.get("t", 0.0))
                    self._available[kid] = None
                elif op == "tomb":
                    blk = KeyBlock(kid, bytearray(rec["len"]), self.link_id, rec.get("t", 0.0), CONSUMED, rec.get("use"))
                    self._blocks[kid] = blk
                elif op == "consume":
                    blk = self._blocks[kid]
                    blk.status = CONSUMED
                    blk.usage = rec.get("use")
                    blk.zeroize()
                    self._available.pop(kid, None)
                # reserve/release records are not replayed: an unconsumed
                # reservation returns to available on restart.

    def compact(self) -> None:
        """Rewrite the journal as the minimal record of the current state."""
        if self._journal_path is None:
            return
        with self._lock:
            tmp = self._journal_path.with_suffix(".compact")
            with open(tmp, "w", encoding="utf-8") as fh:
                for kid, blk in self._blocks.items():
                    if blk.status == CONSUMED:
                        rec = {"op": "tomb", "id": kid.hex(), "len": len(blk.data), "t": blk.created_at, "use": blk.usage}
                    else:
                        rec = {"op": "push", "id": kid.hex(), "data": base64.b64encode(bytes(blk.data)).decode(), "t": blk.created_at}
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._journal.close()
            os.replace(tmp, self._journal_path)
            self._journal = open(self._journal_path, "a", encoding="utf-8")

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    # -- operations ----------------------------------------------------
    def push(self, key_id: bytes, data: bytes, created_at: float = 0.0) -> bool:
        """Store a block; returns False when it was already present (idempotent)."""
        if not data:
            raise KmsError("key block must not be empty")
        with self._lock:
            old = self._blocks.get(key_id)
            if old is not None:
                if old.status != CONSUMED and bytes(old.data) == bytes(data):
                    return False
                raise KeyIdConflict(f"key id {key_id.hex()} already used on link {self.link_id}")
            if len(self._blocks) >= self.quota:
                raise StoreFull(f"store for link {self.link_id} at {self.node} is full")
            self._blocks[key_id] = KeyBlock(key_id, bytearray(data), self.link_id, created_at)
            self._available[key_id] = None
            self._log({"op": "push", "id": key_id.hex(), "data": base64.b64encode(data).decode(), "t": created_at})
            return True

    def get(self, key_id: bytes) -> KeyBlock:
        with self._lock:
            return self._blocks[key_id]

    def read(self, key_id: bytes) -> bytes:
        with self._lock:
            return bytes(self._blocks[key_id].data)

    def oldest_available(self, n_bytes: int) -> list[bytes]:
        """Ids of the oldest available blocks holding at least ``n_bytes`` (or fewer if short)."""
        out, have = [], 0
        with self._lock:
            for kid in self._available:
                if have >= n_bytes:
                    break
                out.append(kid)
                have += len(self._blocks[kid].data)
        return out

    def available_bytes(self) -> int:
        with self._lock:
            return sum(len(self._blocks[k].data) for k in self._available)

    def reserve(self, ids: Iterable[bytes]) -> bool:
        """Reserve all of ``ids`` or none of them."""
        ids = list(ids)
        with self._lock:
            if any(k not in self._available for k in ids):
                return False
            for k in ids:
                del self._available[k]
                self._blocks[k].status = RESERVED
            self._log({"op": "reserve", "id": ids[0].hex() if ids else "", "n": len(ids)})
            return True

    def release(self, ids: Iterable[bytes]) -> None:
        with self._lock:
            for k in reversed(list(ids)):
                blk = self._blocks[k]
                if blk.status != RESERVED:
                    raise KmsError(f"block {k.hex()} is not reserved")
                blk.status = AVAILABLE
                self._available[k] = None
                self._available.move_to_end(k, last=False)

    def consume(self, ids: Iterable[bytes], usage: str) -> bytes:
        """Mark reserved blocks consumed and return their concatenated bytes."""
        parts = []
        with self._lock:
            for k in ids:
                blk = self._blocks[k]
                if blk.status != RESERVED:
                    raise KmsError(f"block {k.hex()} must be reserved before consumption")
                self._log({"op": "consume", "id": k.hex(), "use": usage})
                parts.append(bytes(blk.data))
                blk.status = CONSUMED
                blk.usage = usage
                blk.zeroize()
        return b"".join(parts)

    def counts(self) -> dict:
        with self._lock:
            c = {AVAILABLE: 0, RESERVED: 0, CONSUMED: 0}
            for blk in self._blocks.values():
                c[blk.status] += 1
            return c

    def consumed_usage(self) -> dict[bytes, str]:
        with self._lock:
            return {k: b.usage for k, b in self._blocks.items() if b.status == CONSUMED}

    def __len__(self):
        return len(self._blocks)
