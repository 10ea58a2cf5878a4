"""Hash-chained append-only audit logs.

Two sinks exist on the platform: the management syslog chain (auth, system,
export and admin events) and the filesystem-level chain (data access).
Each record seals its predecessor's hash, so any mutation of a stored
record is detected by :func:`verify_chain`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum


GENESIS = b"\x00" * 32


class Category(Enum):
    AUTH = "Auth"
    SYSLOG = "Syslog"
    DATA_ACCESS = "DataAccess"
    EXPORT = "Export"
    ADMIN = "Admin"


class Sink(Enum):
    MANAGEMENT_SYSLOG = "ManagementSyslog"
    FILESYSTEM_LOG = "FilesystemLog"


# DataAccess records are produced by the filesystem layer and must not
# depend on any platform environment; everything else routes to the
# management syslog sink.
SINK_FOR_CATEGORY = {
    Category.AUTH: Sink.MANAGEMENT_SYSLOG,
    Category.SYSLOG: Sink.MANAGEMENT_SYSLOG,
    Category.DATA_ACCESS: Sink.FILESYSTEM_LOG,
    Category.EXPORT: Sink.MANAGEMENT_SYSLOG,
    Category.ADMIN: Sink.MANAGEMENT_SYSLOG,
}


@dataclass
class AuditRecord:
    seq: int
    tick: int
    category: Category
    actor: str
    detail: str
    prev_hash: bytes
    hash: bytes

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "tick": self.tick,
            "category": self.category.value,
            "actor": self.actor,
            "detail": self.detail,
            "prev_hash": self.prev_hash.hex(),
            "hash": self.hash.hex(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditRecord":
        return cls(
            seq=d["seq"],
            tick=d["tick"],
            category=Category(d["category"]),
            actor=d["actor"],
            detail=d["detail"],
            prev_hash=bytes.fromhex(d["prev_hash"]),
            hash=bytes.fromhex(d["hash"]),
        )


def _canonical(seq: int, tick: int, category: Category, actor: str, detail: str) -> bytes:
    # Length-prefixed field concatenation: unambiguous regardless of field
    # content, so two distinct records never share a preimage.
    out = bytearray()
    for field in (str(seq), str(tick), category.value, actor, detail):
        raw = field.encode("utf-8")
        out += len(raw).to_bytes(4, "big")
        out += raw
    return bytes(out)


def _seal(prev_hash: bytes, seq: int, tick: int, category: Category,
          actor: str, detail: str) -> bytes:
    return hashlib.sha256(prev_hash + _canonical(seq, tick, category, actor, detail)).digest()


class AuditChain:
    """Append-only record chain bound to one sink."""

    def __init__(self, sink: Sink):
        self.sink = sink
        self.records: list[AuditRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def append(self, tick: int, category: Category, actor: str, detail: str) -> AuditRecord:
        from .errors import WrongSink

        if SINK_FOR_CATEGORY[category] is not self.sink:
            raise WrongSink(
                f"category {category.value} does not route to sink {self.sink.value}"
            )
        seq = len(self.records)
        prev = self.records[-1].hash if self.records else GENESIS
        record = AuditRecord(
            seq=seq,
            tick=tick,
            category=category,
            actor=actor,
            detail=detail,
            prev_hash=prev,
            hash=_seal(prev, seq, tick, category, actor, detail),
        )
        self.records.append(record)
        return record

    def to_dict(self) -> dict:
        return {"sink": self.sink.value, "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "AuditChain":
        chain = cls(Sink(d["sink"]))
        chain.records = [AuditRecord.from_dict(r) for r in d["records"]]
        return chain


def verify_chain(records: list[AuditRecord]) -> int | None:
    """Recompute every hash in order.

    Returns ``None`` when the chain is intact, otherwise the index of the
    first record whose stored ``hash`` or ``prev_hash`` disagrees with the
    recomputation.
    """
    expected_prev = GENESIS
    for i, rec in enumerate(records):
        if rec.prev_hash != expected_prev:
            return i
        if rec.seq != i:
            return i
        recomputed = _seal(rec.prev_hash, rec.seq, rec.tick, rec.category,
                           rec.actor, rec.detail)
        if rec.hash != recomputed:
            return i
        expected_prev = rec.hash
    return None


def query(records: list[AuditRecord], category: Category | None = None,
          actor: str | None = None,
          tick_range: tuple[int, int] | None = None) -> list[AuditRecord]:
    """Order-preserving filter over a record list."""
    out = []
    for rec in records:
        if category is not None and rec.category is not category:
            continue
        if actor is not None and rec.actor != actor:
            continue
        if tick_range is not None and not (tick_range[0] <= rec.tick <= tick_range[1]):
            continue
        out.append(rec)
    return out


def dump_jsonl(records: list[AuditRecord]) -> str:
    """One JSON object per line, hashes as lowercase hex."""
    return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)


def load_jsonl(text: str) -> list[AuditRecord]:
    records = []
    for line in text.splitlines():
        line = line.strip()
        if line:
            records.append(AuditRecord.from_dict(json.loads(line)))
    return records
