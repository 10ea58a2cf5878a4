"""Per-project network isolation model and its verification oracle.

Reachability is evaluated per channel with no implicit cross-channel
routing:

* ``OVERLAY_ETHERNET`` — both hosts share an overlay network.
* ``IB_COMPUTE`` — both hosts are Full members of one project compute
  partition.
* ``IB_STORAGE`` — both hosts share the storage partition and at least one
  of them holds Full membership. With the fileserver as the only Full
  member, peer traffic between compute nodes is impossible.
* ``VPN`` — the pair is an enrolled tunnel edge (remote site to a work
  environment host).
* ``MGMT`` — an enabled management edge exists. Edges to the configuration
  master are disabled at lockdown; edges to the syslog sink stay up so log
  routing survives lockdown.

:func:`verify_isolation` enumerates every host pair and channel and flags
anything reachable that the allow rules do not cover, plus structural
membership breaches (unreachability itself is never a violation).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum

from .errors import InvalidPhase, ProjectMismatch, UnknownHost, WorkNotRunning
from .lifecycle import EnvKind, Phase


class Channel(Enum):
    OVERLAY_ETHERNET = "OverlayEthernet"
    IB_COMPUTE = "IbCompute"
    IB_STORAGE = "IbStorage"
    VPN = "Vpn"
    MGMT = "Mgmt"


CHANNEL_TOKENS = {
    "overlay": Channel.OVERLAY_ETHERNET,
    "ibcompute": Channel.IB_COMPUTE,
    "ibstorage": Channel.IB_STORAGE,
    "vpn": Channel.VPN,
    "mgmt": Channel.MGMT,
}


class HostKind(Enum):
    VM = "Vm"
    FILESERVER = "Fileserver"
    CONFIG_MASTER = "ConfigMaster"
    SYSLOG_SINK = "SyslogSink"
    REMOTE_SITE = "RemoteSite"


class PartitionKind(Enum):
    PROJECT_COMPUTE = "ProjectCompute"
    STORAGE = "Storage"


class Membership(Enum):
    FULL = "Full"
    LIMITED = "Limited"


@dataclass
class HostInfo:
    id: str
    kind: HostKind
    project: str | None = None
    env_id: str | None = None
    env_kind: EnvKind | None = None


@dataclass
class Overlay:
    project: str
    members: set[str] = field(default_factory=set)


@dataclass
class Partition:
    kind: PartitionKind
    members: dict[str, Membership] = field(default_factory=dict)


@dataclass(frozen=True)
class Violation:
    src: str
    dst: str
    channel: str
    rule: str

    def to_json(self) -> str:
        return json.dumps(
            {"src": self.src, "dst": self.dst, "channel": self.channel,
             "rule": self.rule})


STORAGE_PARTITION = "ib-storage"


class NetState:
    def __init__(self):
        self.hosts: dict[str, HostInfo] = {}
        self.overlays: dict[str, Overlay] = {}
        self.ib_partitions: dict[str, Partition] = {}
        self.vpn_edges: set[tuple[str, str]] = set()
        # (host, target) -> enabled
        self.mgmt_edges: dict[tuple[str, str], bool] = {}
        # environment id -> overlay / compute-partition ids
        self.env_overlay: dict[str, str] = {}
        self.env_partition: dict[str, str] = {}

    # -- construction helpers -------------------------------------------------

    def add_host(self, host_id: str, kind: HostKind, project: str | None = None,
                 env_id: str | None = None, env_kind: EnvKind | None = None) -> None:
        self.hosts[host_id] = HostInfo(host_id, kind, project, env_id, env_kind)

    def remove_host(self, host_id: str) -> None:
        self.hosts.pop(host_id, None)
        for overlay in self.overlays.values():
            overlay.members.discard(host_id)
        for part in self.ib_partitions.values():
            part.members.pop(host_id, None)
        self.vpn_edges = {e for e in self.vpn_edges if host_id not in e}
        self.mgmt_edges = {e: v for e, v in self.mgmt_edges.items()
                           if host_id not in e}

    def create_overlay(self, overlay_id: str, project: str, env_id: str) -> None:
        self.overlays[overlay_id] = Overlay(project=project)
        self.env_overlay[env_id] = overlay_id

    def create_partition(self, partition_id: str, kind: PartitionKind,
                         env_id: str | None = None) -> None:
        self.ib_partitions[partition_id] = Partition(kind=kind)
        if env_id is not None:
            self.env_partition[env_id] = partition_id

    def enroll_vpn(self, site: str, host: str) -> None:
        self.vpn_edges.add((site, host))

    def set_mgmt_edge(self, host: str, target: str, enabled: bool = True) -> None:
        self.mgmt_edges[(host, target)] = enabled

    def lockdown(self, host_ids: list[str], config_master: str) -> None:
        """Firewall step: the hosts lose connectivity to the config master."""
        for host in host_ids:
            if (host, config_master) in self.mgmt_edges:
                self.mgmt_edges[(host, config_master)] = False

    def clone(self) -> "NetState":
        return copy.deepcopy(self)

    # -- reachability oracle ---------------------------------------------------

    def reachable(self, src: str, dst: str, channel: Channel) -> bool:
        if src not in self.hosts:
            raise UnknownHost(src)
        if dst not in self.hosts:
            raise UnknownHost(dst)
        if channel is Channel.OVERLAY_ETHERNET:
            return any(src in o.members and dst in o.members
                       for o in self.overlays.values())
        if channel is Channel.IB_COMPUTE:
            return any(
                p.members.get(src) is Membership.FULL
                and p.members.get(dst) is Membership.FULL
                for p in self.ib_partitions.values()
                if p.kind is PartitionKind.PROJECT_COMPUTE
            )
        if channel is Channel.IB_STORAGE:
            return any(
                src in p.members and dst in p.members
                and (p.members[src] is Membership.FULL
                     or p.members[dst] is Membership.FULL)
                for p in self.ib_partitions.values()
                if p.kind is PartitionKind.STORAGE
            )
        if channel is Channel.VPN:
            return (src, dst) in self.vpn_edges or (dst, src) in self.vpn_edges
        return bool(self.mgmt_edges.get((src, dst))
                    or self.mgmt_edges.get((dst, src)))

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "hosts": [
                {"id": h.id, "kind": h.kind.value, "project": h.project,
                 "env_id": h.env_id,
                 "env_kind": h.env_kind.value if h.env_kind else None}
                for h in self.hosts.values()
            ],
            "overlays": {
                oid: {"project": o.project, "members": sorted(o.members)}
                for oid, o in self.overlays.items()
            },
            "ib_partitions": {
                pid: {"kind": p.kind.value,
                      "members": {h: m.value for h, m in p.members.items()}}
                for pid, p in self.ib_partitions.items()
            },
            "vpn_edges": sorted(list(e) for e in self.vpn_edges),
            "mgmt_edges": [
                {"host": h, "target": t, "enabled": enabled}
                for (h, t), enabled in self.mgmt_edges.items()
            ],
            "env_overlay": dict(self.env_overlay),
            "env_partition": dict(self.env_partition),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetState":
        net = cls()
        for h in d["hosts"]:
            net.add_host(h["id"], HostKind(h["kind"]), h["project"], h["env_id"],
                         EnvKind(h["env_kind"]) if h["env_kind"] else None)
        for oid, o in d["overlays"].items():
            net.overlays[oid] = Overlay(o["project"], set(o["members"]))
        for pid, p in d["ib_partitions"].items():
            net.ib_partitions[pid] = Partition(
                PartitionKind(p["kind"]),
                {h: Membership(m) for h, m in p["members"].items()})
        net.vpn_edges = {tuple(e) for e in d["vpn_edges"]}
        net.mgmt_edges = {(e["host"], e["target"]): e["enabled"]
                          for e in d["mgmt_edges"]}
        net.env_overlay = dict(d["env_overlay"])
        net.env_partition = dict(d["env_partition"])
        return net


def reachable(net: NetState, src: str, dst: str, channel: Channel) -> bool:
    return net.reachable(src, dst, channel)


def reachability_relation(net: NetState,
                          hosts: set[str] | None = None) -> frozenset:
    """All reachable (src, dst, channel) triples, canonicalized src < dst.

    ``hosts`` restricts the relation to pairs drawn entirely from that set.
    """
    ids = sorted(hosts) if hosts is not None else sorted(net.hosts)
    rel = set()
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            for ch in Channel:
                if net.reachable(a, b, ch):
                    rel.add((a, b, ch.value))
    return frozenset(rel)


def join_environments(net: NetState, work, compute) -> NetState:
    """Merge a compute environment into its project's work environment.

    The compute VMs move into the work overlay and join the project's
    compute partition as Full members; the compute environment's own
    overlay and partition disappear. Hosts of other projects keep exactly
    the reachability they had.
    """
    if work.project != compute.project:
        raise ProjectMismatch(
            f"work={work.project} compute={compute.project}")
    if work.phase is not Phase.RUNNING:
        raise WorkNotRunning(f"work env {work.id} is {work.phase.label}")
    if compute.phase < Phase.LOCKED_DOWN:
        raise InvalidPhase(
            f"compute env {compute.id} is {compute.phase.label}; "
            "join requires at least LockedDown")

    out = net.clone()
    work_overlay = out.overlays[out.env_overlay[work.id]]
    work_partition = out.ib_partitions[out.env_partition[work.id]]
    compute_vm_ids = [vm.id for vm in compute.vms]

    old_overlay_id = out.env_overlay.pop(compute.id, None)
    if old_overlay_id is not None:
        out.overlays.pop(old_overlay_id, None)
    old_partition_id = out.env_partition.pop(compute.id, None)
    if old_partition_id is not None:
        out.ib_partitions.pop(old_partition_id, None)

    for vm_id in compute_vm_ids:
        work_overlay.members.add(vm_id)
        work_partition.members[vm_id] = Membership.FULL
    # the compute env now answers to the work overlay/partition
    out.env_overlay[compute.id] = out.env_overlay[work.id]
    out.env_partition[compute.id] = out.env_partition[work.id]
    return out


def verify_isolation(net: NetState,
                     phases: dict[str, Phase] | None = None) -> list[Violation]:
    """Exhaustive sweep of host pairs x channels plus membership scans.

    Reachability is symmetric per channel, so each offending pair is
    reported once (src < dst). ``phases`` supplies environment phases for
    the pre-lockdown management allowance; a missing entry counts as
    locked down.
    """
    phases = phases or {}
    violations: list[Violation] = []

    # membership scans: malformed state is reported even when it makes
    # hosts unreachable (unreachability alone is never a violation)
    for pid, part in sorted(net.ib_partitions.items()):
        if part.kind is PartitionKind.STORAGE:
            full = [h for h, m in part.members.items() if m is Membership.FULL]
            if not full:
                violations.append(Violation(pid, "", "", "StoragePartitionNoFullMember"))
            elif len(full) > 1:
                violations.append(Violation(pid, "", "", "StoragePartitionMultipleFull"))
            for h in sorted(full):
                info = net.hosts.get(h)
                if info is None or info.kind is not HostKind.FILESERVER:
                    violations.append(Violation(pid, h, "", "StorageFullNotFileserver"))
        else:
            projects = {net.hosts[h].project for h in part.members if h in net.hosts}
            if len(projects) > 1:
                violations.append(Violation(pid, "", "", "ComputePartitionMixedProjects"))
            for h, m in sorted(part.members.items()):
                if m is not Membership.FULL:
                    violations.append(Violation(pid, h, "", "ComputePartitionLimitedMember"))
    overlay_count: dict[str, int] = {}
    for oid, overlay in sorted(net.overlays.items()):
        for h in sorted(overlay.members):
            overlay_count[h] = overlay_count.get(h, 0) + 1
            info = net.hosts.get(h)
            if info is not None and info.project != overlay.project:
                violations.append(Violation(oid, h, "", "OverlayForeignMember"))
    for h, count in sorted(overlay_count.items()):
        if count > 1:
            violations.append(Violation(h, "", "", "HostInMultipleOverlays"))
    for site, host in sorted(net.vpn_edges):
        info = net.hosts.get(host)
        if info is None or info.env_kind is not EnvKind.WORK:
            violations.append(Violation(site, host, "", "VpnEdgeNotWorkHost"))

    # pair sweep with per-host membership precomputed so the enumeration
    # over all pairs stays cheap on large states
    ids = sorted(net.hosts)
    overlays_of: dict[str, set[str]] = {h: set() for h in ids}
    for oid, overlay in net.overlays.items():
        for h in overlay.members:
            if h in overlays_of:
                overlays_of[h].add(oid)
    compute_full: dict[str, set[str]] = {h: set() for h in ids}
    storage_parts: dict[str, set[str]] = {h: set() for h in ids}
    storage_full: dict[str, set[str]] = {h: set() for h in ids}
    for pid, part in net.ib_partitions.items():
        for h, m in part.members.items():
            if h not in net.hosts:
                continue
            if part.kind is PartitionKind.PROJECT_COMPUTE:
                if m is Membership.FULL:
                    compute_full[h].add(pid)
            else:
                storage_parts[h].add(pid)
                if m is Membership.FULL:
                    storage_full[h].add(pid)
    vpn_nbrs: dict[str, set[str]] = {h: set() for h in ids}
    for a, b in net.vpn_edges:
        if a in vpn_nbrs and b in vpn_nbrs:
            vpn_nbrs[a].add(b)
            vpn_nbrs[b].add(a)
    mgmt_nbrs: dict[str, set[str]] = {h: set() for h in ids}
    for (a, b), enabled in net.mgmt_edges.items():
        if enabled and a in mgmt_nbrs and b in mgmt_nbrs:
            mgmt_nbrs[a].add(b)
            mgmt_nbrs[b].add(a)

    def same_project(a: HostInfo, b: HostInfo) -> bool:
        return a.project is not None and a.project == b.project

    def locked(info: HostInfo) -> bool:
        if info.env_id is None:
            return True
        phase = phases.get(info.env_id)
        return phase is None or phase >= Phase.LOCKED_DOWN

    for i, a in enumerate(ids):
        ia = net.hosts[a]
        for b in ids[i + 1:]:
            ib = net.hosts[b]
            if overlays_of[a] & overlays_of[b]:
                if not same_project(ia, ib):
                    violations.append(
                        Violation(a, b, Channel.OVERLAY_ETHERNET.value,
                                  "CrossProjectOverlay"))
            if compute_full[a] & compute_full[b]:
                if not same_project(ia, ib):
                    violations.append(
                        Violation(a, b, Channel.IB_COMPUTE.value,
                                  "CrossProjectIbCompute"))
            shared_storage = storage_parts[a] & storage_parts[b]
            if shared_storage and (storage_full[a] & shared_storage
                                   or storage_full[b] & shared_storage):
                if (ia.kind is not HostKind.FILESERVER
                        and ib.kind is not HostKind.FILESERVER):
                    violations.append(
                        Violation(a, b, Channel.IB_STORAGE.value,
                                  "StoragePeerTraffic"))
            # VPN reachability equals enrollment; the enrollment scan above
            # already polices where tunnels may terminate.
            if b in mgmt_nbrs[a]:
                if ib.kind is HostKind.SYSLOG_SINK or ia.kind is HostKind.SYSLOG_SINK:
                    pass  # log routing is always allowed
                elif ib.kind is HostKind.CONFIG_MASTER:
                    if locked(ia):
                        violations.append(
                            Violation(a, b, Channel.MGMT.value, "MgmtAfterLockdown"))
                elif ia.kind is HostKind.CONFIG_MASTER:
                    if locked(ib):
                        violations.append(
                            Violation(a, b, Channel.MGMT.value, "MgmtAfterLockdown"))
                else:
                    violations.append(
                        Violation(a, b, Channel.MGMT.value, "UnexpectedMgmtEdge"))
    return violations


def violations_jsonl(violations: list[Violation]) -> str:
    return "".join(v.to_json() + "\n" for v in violations)
