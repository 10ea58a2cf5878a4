"""Central key-value store with per-key monotone versions.

Holds the technical records for provisioned clusters and projects under
path-style keys (``/clusters/<env-id>``, ``/projects/<project-id>``).
"""

from __future__ import annotations

import base64

from .errors import KeyNotFound


class MetadataStore:
    def __init__(self):
        # key -> (value bytes, version); versions start at 1 and only grow
        self._entries: dict[str, tuple[bytes, int]] = {}

    def put(self, key: str, value: bytes) -> int:
        _, version = self._entries.get(key, (b"", 0))
        version += 1
        self._entries[key] = (value, version)
        return version

    def read(self, key: str) -> tuple[bytes, int]:
        if key not in self._entries:
            raise KeyNotFound(key)
        return self._entries[key]

    def exists(self, key: str) -> bool:
        return key in self._entries

    def keys(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self._entries if k.startswith(prefix))

    def to_dict(self) -> dict:
        return {
            k: {"value": base64.b64encode(v).decode("ascii"), "version": ver}
            for k, (v, ver) in self._entries.items()
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetadataStore":
        store = cls()
        for k, entry in d.items():
            store._entries[k] = (base64.b64decode(entry["value"]), entry["version"])
        return store
