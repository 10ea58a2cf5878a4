"""ACL-controlled storage tree with filesystem-level access logging.

Nodes carry a flat per-node ACL keyed by principal class (no inheritance
at access time) and a storage class: persistent project storage survives
environment teardown, VM-local ephemeral storage does not. Every access
attempt, granted or denied, lands in the filesystem audit chain; that sink
works no matter what state any environment is in.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from enum import Enum

from .audit import AuditChain, Category
from .errors import NotFound, PermissionDenied


class StorageClass(Enum):
    LUSTRE_PERSISTENT = "LustrePersistent"
    VM_EPHEMERAL = "VmEphemeral"


class FsOp(Enum):
    READ = "Read"
    WRITE = "Write"
    LIST = "List"


class PrincipalClass(Enum):
    RESEARCHER = "Researcher"
    DATA_MANAGER = "DataManager"
    TTP = "Ttp"
    SYSTEM = "System"


@dataclass(frozen=True)
class Principal:
    id: str
    cls: PrincipalClass
    # project for researchers, data owner for data managers
    scope: str | None = None

    @property
    def acl_key(self) -> str:
        if self.cls is PrincipalClass.RESEARCHER:
            return f"researcher:{self.scope}"
        if self.cls is PrincipalClass.DATA_MANAGER:
            return f"datamanager:{self.scope}"
        return self.cls.value.lower()

    def to_dict(self) -> dict:
        return {"id": self.id, "cls": self.cls.value, "scope": self.scope}

    @classmethod
    def from_dict(cls, d: dict) -> "Principal":
        return cls(d["id"], PrincipalClass(d["cls"]), d["scope"])


def researcher_key(project: str) -> str:
    return f"researcher:{project}"


def datamanager_key(owner: str) -> str:
    return f"datamanager:{owner}"


TTP_KEY = "ttp"

RWL = frozenset({FsOp.READ, FsOp.WRITE, FsOp.LIST})
RL = frozenset({FsOp.READ, FsOp.LIST})


@dataclass
class FsNode:
    path: str
    owner: str
    # acl key -> permitted operations
    perms: dict[str, frozenset[FsOp]]
    storage_class: StorageClass
    content: bytes = b""
    is_dir: bool = False

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "owner": self.owner,
            "perms": {k: sorted(op.value for op in v) for k, v in self.perms.items()},
            "storage_class": self.storage_class.value,
            "content": base64.b64encode(self.content).decode("ascii"),
            "is_dir": self.is_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FsNode":
        return cls(
            path=d["path"], owner=d["owner"],
            perms={k: frozenset(FsOp(o) for o in v) for k, v in d["perms"].items()},
            storage_class=StorageClass(d["storage_class"]),
            content=base64.b64decode(d["content"]),
            is_dir=d["is_dir"],
        )


@dataclass
class WipeReport:
    subject: str
    deleted_paths: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"subject": self.subject, "deleted_paths": list(self.deleted_paths)}


def _parent(path: str) -> str:
    head, _, _ = path.rpartition("/")
    return head or "/"


class SecureFs:
    """Storage tree; all mutations and reads flow through :meth:`access`."""

    def __init__(self, chain: AuditChain, clock=lambda: 0):
        self.nodes: dict[str, FsNode] = {}
        self._chain = chain
        self._clock = clock
        self.mkdir("/", owner="system", perms={})

    # -- plumbing (not principal-gated; used by platform setup) --------------

    def mkdir(self, path: str, owner: str, perms: dict[str, frozenset[FsOp]],
              storage_class: StorageClass = StorageClass.LUSTRE_PERSISTENT) -> FsNode:
        node = FsNode(path=path, owner=owner, perms=dict(perms),
                      storage_class=storage_class, is_dir=True)
        self.nodes[path] = node
        return node

    def exists(self, path: str) -> bool:
        return path in self.nodes

    def node(self, path: str) -> FsNode:
        if path not in self.nodes:
            raise NotFound(path)
        return self.nodes[path]

    def subtree(self, root: str) -> list[FsNode]:
        prefix = root.rstrip("/") + "/"
        return [n for p, n in sorted(self.nodes.items())
                if p == root or p.startswith(prefix)]

    # -- the gated operation --------------------------------------------------

    def access(self, principal: Principal, path: str, op: FsOp,
               data: bytes | None = None,
               perms: dict[str, frozenset[FsOp]] | None = None):
        """Attempt ``op`` on ``path`` as ``principal``.

        Read returns content, List returns child names, Write returns the
        node path. Every attempt appends one data-access record.
        """
        try:
            result = self._attempt(principal, path, op, data, perms)
        except (PermissionDenied, NotFound) as err:
            self._log(principal, path, op, f"denied:{err.kind}")
            raise
        self._log(principal, path, op, "granted")
        return result

    def _attempt(self, principal: Principal, path: str, op: FsOp,
                 data: bytes | None, perms: dict[str, frozenset[FsOp]] | None):
        if op in (FsOp.READ, FsOp.LIST):
            if path not in self.nodes:
                raise NotFound(path)
            node = self.nodes[path]
            self._require(principal, node, op)
            if op is FsOp.READ:
                return node.content
            prefix = path.rstrip("/") + "/"
            return sorted(
                p for p in self.nodes
                if p.startswith(prefix) and "/" not in p[len(prefix):]
            )
        # write: overwrite in place, or create under an existing parent
        if data is None:
            data = b""
        if path in self.nodes:
            node = self.nodes[path]
            self._require(principal, node, FsOp.WRITE)
            node.content = data
            return path
        parent = self.nodes.get(_parent(path))
        if parent is None:
            raise NotFound(f"no parent directory for {path}")
        self._require(principal, parent, FsOp.WRITE)
        # the new node copies the parent's ACL and storage class unless the
        # writer supplies an explicit ACL
        self.nodes[path] = FsNode(
            path=path, owner=principal.id,
            perms=dict(perms) if perms is not None else dict(parent.perms),
            storage_class=parent.storage_class, content=data,
        )
        return path

    def _require(self, principal: Principal, node: FsNode, op: FsOp) -> None:
        if principal.cls is PrincipalClass.SYSTEM:
            return  # platform plumbing: unrestricted but still logged
        allowed = node.perms.get(principal.acl_key, frozenset())
        if op not in allowed:
            raise PermissionDenied(
                f"{principal.id} may not {op.value} {node.path}"
            )

    def _log(self, principal: Principal, path: str, op: FsOp, outcome: str) -> None:
        self._chain.append(self._clock(), Category.DATA_ACCESS, principal.id,
                           f"{op.value} {path} {outcome}")

    # -- wipes ----------------------------------------------------------------

    def delete_subtree(self, root: str,
                       storage_class: StorageClass | None = None) -> list[str]:
        """Remove the subtree at ``root``; returns deleted *file* paths.

        When ``storage_class`` is given only nodes of that class go away.
        Directory nodes are removed silently.
        """
        deleted_files = []
        for node in self.subtree(root):
            if storage_class is not None and node.storage_class is not storage_class:
                continue
            del self.nodes[node.path]
            if not node.is_dir:
                deleted_files.append(node.path)
        return deleted_files

    def wipe_project(self, project: str) -> WipeReport:
        root = f"/projects/{project}"
        if root not in self.nodes:
            raise NotFound(f"project {project}")
        return WipeReport(subject=project,
                          deleted_paths=self.delete_subtree(root))

    # -- manifest -------------------------------------------------------------

    def export_manifest(self) -> str:
        """Tree structure as text: path, kind, class, ACL per line."""
        lines = []
        for path in sorted(self.nodes):
            node = self.nodes[path]
            acl = ";".join(
                f"{key}={''.join(sorted(op.value[0].lower() for op in ops))}"
                for key, ops in sorted(node.perms.items())
            )
            kind = "dir" if node.is_dir else "file"
            lines.append(f"{path}\t{kind}\t{node.storage_class.value}\t{node.owner}\t{acl}")
        return "\n".join(lines) + "\n"

    def import_manifest(self, text: str, chain: AuditChain) -> "SecureFs":
        fs = SecureFs(chain, self._clock)
        fs.nodes.clear()
        op_by_letter = {"r": FsOp.READ, "w": FsOp.WRITE, "l": FsOp.LIST}
        for line in text.splitlines():
            if not line.strip():
                continue
            path, kind, storage, owner, acl = line.split("\t")
            perms = {}
            if acl:
                for part in acl.split(";"):
                    key, _, letters = part.partition("=")
                    perms[key] = frozenset(op_by_letter[c] for c in letters)
            fs.nodes[path] = FsNode(
                path=path, owner=owner, perms=perms,
                storage_class=StorageClass(storage), is_dir=(kind == "dir"),
            )
        return fs

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {"nodes": [n.to_dict() for n in self.nodes.values()]}

    @classmethod
    def from_dict(cls, d: dict, chain: AuditChain, clock) -> "SecureFs":
        fs = cls(chain, clock)
        fs.nodes = {}
        for nd in d["nodes"]:
            node = FsNode.from_dict(nd)
            fs.nodes[node.path] = node
        return fs
