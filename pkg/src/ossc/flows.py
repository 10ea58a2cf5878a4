"""Data movement: pseudonymized linkage and the export review pipeline.

Direct identifiers (``link_id``) never reach project-readable storage.
Linkage joins an owner-staged dataset with a project-staged dataset on the
raw identifier, then replaces it with a keyed digest under the project
key, so neither side can map the output back to the other side's records.
Outbound artifacts pass an advisory minimum-group-size check and an
authoritative manual review before release to the outbox.
"""

from __future__ import annotations

import csv
import hashlib
import hmac
import io
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    CollisionDetected, KeyAccessDenied, NotReviewer, SchemaMismatch, WrongState,
)
from .securefs import Principal, PrincipalClass

K_MIN = 10
LINK_COLUMN = "link_id"
PSEUDONYM_COLUMN = "pseudonym"


@dataclass(frozen=True)
class KeyScope:
    kind: str  # "owner" | "project"
    name: str


@dataclass
class PseudonymKey:
    id: str
    secret: bytes
    scope: KeyScope

    def to_dict(self) -> dict:
        return {"id": self.id, "secret": self.secret.hex(),
                "scope": {"kind": self.scope.kind, "name": self.scope.name}}

    @classmethod
    def from_dict(cls, d: dict) -> "PseudonymKey":
        return cls(d["id"], bytes.fromhex(d["secret"]),
                   KeyScope(d["scope"]["kind"], d["scope"]["name"]))


def may_read_key(principal: Principal, key: PseudonymKey) -> bool:
    if key.scope.kind == "owner":
        return (principal.cls is PrincipalClass.DATA_MANAGER
                and principal.scope == key.scope.name)
    return principal.cls is PrincipalClass.TTP


@dataclass
class DatasetRecord:
    link_id: str
    attributes: dict[str, str]


def pseudonym(key: PseudonymKey, salt: bytes, link_id: str) -> str:
    digest = hmac.new(key.secret, salt + link_id.encode("utf-8"), hashlib.sha256)
    return digest.hexdigest()


def pseudonymize(records: list[DatasetRecord], key: PseudonymKey, salt: bytes,
                 caller: Principal) -> list[DatasetRecord]:
    """Replace each record's identifier with its keyed digest.

    Deterministic for a fixed (key, salt); aborts if two distinct
    identifiers collide.
    """
    if not may_read_key(caller, key):
        raise KeyAccessDenied(f"{caller.id} may not use key {key.id}")
    seen: dict[str, str] = {}
    out = []
    for rec in records:
        token = pseudonym(key, salt, rec.link_id)
        previous = seen.get(token)
        if previous is not None and previous != rec.link_id:
            raise CollisionDetected(f"digest collision on {token[:16]}…")
        seen[token] = rec.link_id
        out.append(DatasetRecord(link_id=token, attributes=dict(rec.attributes)))
    return out


# -- CSV dataset handling ------------------------------------------------------

def parse_dataset(text: str) -> tuple[list[str], list[DatasetRecord]]:
    """Read a CSV with a ``link_id`` column into records.

    Returns the attribute column names (identifier excluded) in file order.
    """
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or LINK_COLUMN not in reader.fieldnames:
        raise SchemaMismatch(f"dataset needs a {LINK_COLUMN} column")
    columns = [c for c in reader.fieldnames if c != LINK_COLUMN]
    records = []
    for row in reader:
        link = row.pop(LINK_COLUMN)
        records.append(DatasetRecord(link_id=link, attributes=row))
    return columns, records


def emit_dataset(id_column: str, columns: list[str],
                 records: list[DatasetRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([id_column] + columns)
    for rec in records:
        writer.writerow([rec.link_id] + [rec.attributes.get(c, "") for c in columns])
    return buf.getvalue()


def link_datasets(owner_text: str, project_text: str, project_key: PseudonymKey,
                  salt: bytes, caller: Principal) -> str:
    """Inner join on the raw identifier, pseudonymized output.

    Output rows carry the project-key digest plus the union of both sides'
    attribute columns, sorted by digest so the row order leaks nothing
    about input order.
    """
    if caller.cls is not PrincipalClass.TTP:
        from .errors import NotTtp
        raise NotTtp(f"{caller.id} is not the trusted third party")
    owner_cols, owner_records = parse_dataset(owner_text)
    project_cols, project_records = parse_dataset(project_text)
    overlap = set(owner_cols) & set(project_cols)
    if overlap:
        raise SchemaMismatch(f"duplicate attribute columns: {sorted(overlap)}")
    by_id: dict[str, list[DatasetRecord]] = {}
    for rec in project_records:
        by_id.setdefault(rec.link_id, []).append(rec)
    joined: list[DatasetRecord] = []
    for owner_rec in owner_records:
        for project_rec in by_id.get(owner_rec.link_id, []):
            attrs = dict(owner_rec.attributes)
            attrs.update(project_rec.attributes)
            joined.append(DatasetRecord(owner_rec.link_id, attrs))
    pseudonymized = pseudonymize(joined, project_key, salt, caller)
    pseudonymized.sort(key=lambda r: r.link_id)
    return emit_dataset(PSEUDONYM_COLUMN, owner_cols + project_cols, pseudonymized)


def generate_dataset(rng, rows: int, columns: list[str],
                     id_universe: int = 1000) -> str:
    """Deterministic synthetic dataset; ids sampled without replacement."""
    rows = min(rows, id_universe)
    ids = rng.sample(range(id_universe), rows)
    records = [
        DatasetRecord(
            link_id=f"u{num:06d}",
            attributes={c: str(rng.randint(0, 9999)) for c in columns},
        )
        for num in ids
    ]
    return emit_dataset(LINK_COLUMN, columns, records)


# -- disclosure check ------------------------------------------------------------

COUNT_COLUMNS = ("count", "n", "units")


@dataclass
class CheckReport:
    rows_checked: int
    flagged_rows: list[int] = field(default_factory=list)
    k_min: int = K_MIN
    note: str = ""

    @property
    def passed(self) -> bool:
        return not self.flagged_rows

    def to_dict(self) -> dict:
        return {"rows_checked": self.rows_checked,
                "flagged_rows": list(self.flagged_rows),
                "k_min": self.k_min, "note": self.note, "passed": self.passed}

    @classmethod
    def from_dict(cls, d: dict) -> "CheckReport":
        return cls(d["rows_checked"], list(d["flagged_rows"]), d["k_min"], d["note"])


def run_disclosure_check(text: str, k_min: int = K_MIN) -> CheckReport:
    """Advisory scan: every aggregate row must cover at least ``k_min`` units.

    Looks for a unit-count column; artifacts without one (or non-CSV
    artifacts) pass with a note, leaving the decision to the reviewer.
    """
    try:
        reader = csv.DictReader(io.StringIO(text))
        fields = reader.fieldnames or []
    except csv.Error:
        return CheckReport(0, note="not parseable as CSV")
    count_col = next((c for c in fields if c.lower() in COUNT_COLUMNS), None)
    if count_col is None:
        return CheckReport(0, note="no unit-count column; manual review only")
    flagged = []
    rows = 0
    for i, row in enumerate(reader):
        rows += 1
        try:
            units = int(row[count_col])
        except (TypeError, ValueError):
            flagged.append(i)
            continue
        if units < k_min:
            flagged.append(i)
    return CheckReport(rows, flagged, k_min)


# -- export state machine -----------------------------------------------------------

class RequestState(Enum):
    DRAFT = "Draft"
    SUBMITTED = "Submitted"
    APPROVED = "Approved"
    REJECTED = "Rejected"
    RELEASED = "Released"


class Direction(Enum):
    IMPORT = "Import"
    EXPORT = "Export"


@dataclass
class TransferRequest:
    id: str
    project: str
    direction: Direction
    payload_path: str
    state: RequestState = RequestState.DRAFT
    reviewer: str | None = None
    auto_check: CheckReport | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id, "project": self.project,
            "direction": self.direction.value,
            "payload_path": self.payload_path, "state": self.state.value,
            "reviewer": self.reviewer,
            "auto_check": self.auto_check.to_dict() if self.auto_check else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferRequest":
        return cls(
            d["id"], d["project"], Direction(d["direction"]), d["payload_path"],
            RequestState(d["state"]), d["reviewer"],
            CheckReport.from_dict(d["auto_check"]) if d["auto_check"] else None,
        )

    def submit(self, check: CheckReport) -> None:
        if self.state is not RequestState.DRAFT:
            raise WrongState(f"request {self.id} is {self.state.value}")
        self.auto_check = check
        self.state = RequestState.SUBMITTED

    def review(self, reviewer: Principal, approve: bool) -> None:
        if self.state is not RequestState.SUBMITTED:
            raise WrongState(f"request {self.id} is {self.state.value}")
        if reviewer.cls is not PrincipalClass.DATA_MANAGER:
            raise NotReviewer(f"{reviewer.id} is not data-owner staff")
        self.reviewer = reviewer.id
        self.state = RequestState.APPROVED if approve else RequestState.REJECTED

    def mark_released(self) -> None:
        if self.state is not RequestState.APPROVED:
            raise WrongState(f"request {self.id} is {self.state.value}")
        self.state = RequestState.RELEASED


@dataclass
class OutboxRecord:
    request_id: str
    artifact_path: str
    outbox_path: str

    def to_dict(self) -> dict:
        return {"request_id": self.request_id,
                "artifact_path": self.artifact_path,
                "outbox_path": self.outbox_path}

    @classmethod
    def from_dict(cls, d: dict) -> "OutboxRecord":
        return cls(d["request_id"], d["artifact_path"], d["outbox_path"])
