"""The assembled platform: one state value, serialized command processing.

Owns the host scheduler, metadata store, network state, storage tree, both
audit chains, the provisioner, and the data-flow registries (projects,
owners, pseudonym keys, transfer requests, outbox). All randomness comes
from one seeded generator so whole sessions replay byte-identically.
"""

from __future__ import annotations

import json
import random

from .audit import AuditChain, Category, Sink
from .errors import (
    InvalidPhase, InvalidSpec, NoVpnEdge, NotAuthenticated, NotFound, NotTtp,
)
from .hostsched import JobSpec, Node, SchedulerState, default_topology
from .lifecycle import EnvKind, Phase
from .metastore import MetadataStore
from .netmodel import (
    STORAGE_PARTITION, Channel, HostKind, Membership, NetState, PartitionKind,
    Violation, join_environments, verify_isolation,
)
from .provisioner import Provisioner
from .securefs import (
    RL, RWL, FsOp, Principal, PrincipalClass, SecureFs, WipeReport,
    datamanager_key, researcher_key,
)
from . import flows
from .flows import (
    CheckReport, Direction, OutboxRecord, PseudonymKey, KeyScope,
    RequestState, TransferRequest, run_disclosure_check,
)

FILESERVER_HOST = "fileserver"
SYSTEM = Principal("system", PrincipalClass.SYSTEM)
TTP = Principal("ttp", PrincipalClass.TTP)


class Platform:
    def __init__(self, nodes: list[Node] | None = None, seed: int = 0,
                 pilot_mode: bool = False, bootstrap: bool = True):
        self.seed = seed
        self.rng = random.Random(seed)
        self.mgmt_chain = AuditChain(Sink.MANAGEMENT_SYSLOG)
        self.fs_chain = AuditChain(Sink.FILESYSTEM_LOG)
        self.host_sched = SchedulerState(
            nodes if nodes is not None else default_topology(),
            id_prefix="hostjob")
        self.meta = MetadataStore()
        self.net = NetState()
        self.fs = SecureFs(self.fs_chain, clock=lambda: self.clock)
        self.platform_log: list[dict] = []
        self.prov = Provisioner(self.host_sched, self.meta, self.net, self.fs,
                                self.mgmt_chain, lambda: self.clock,
                                self.platform_log)
        self.prov.pilot_mode = pilot_mode
        self.principals: dict[str, Principal] = {"system": SYSTEM, "ttp": TTP}
        self.projects: dict[str, dict] = {}
        self.owners: dict[str, dict] = {}
        self.keys: dict[str, PseudonymKey] = {}
        self.requests: dict[str, TransferRequest] = {}
        self.outbox: list[OutboxRecord] = []
        self._request_seq = 0
        if bootstrap:
            self._bootstrap()

    # -- fundamentals --------------------------------------------------------

    @property
    def clock(self) -> int:
        return self.host_sched.clock

    def _bootstrap(self) -> None:
        for path in ("/projects", "/owners", "/outbox", "/vm"):
            self.fs.mkdir(path, owner="system", perms={})
        self.net.add_host(FILESERVER_HOST, HostKind.FILESERVER)
        self.net.create_partition(STORAGE_PARTITION, PartitionKind.STORAGE)
        self.net.ib_partitions[STORAGE_PARTITION].members[FILESERVER_HOST] = \
            Membership.FULL
        self.prov.launch_environment("platform", EnvKind.MANAGEMENT)
        self.tick(1)  # allocates and provisions the management environment

    def principal(self, principal_id: str) -> Principal:
        if principal_id not in self.principals:
            raise NotFound(f"principal {principal_id}")
        return self.principals[principal_id]

    def _admin(self, actor: str, detail: str) -> None:
        self.mgmt_chain.append(self.clock, Category.ADMIN, actor, detail)

    def _fresh_salt(self) -> bytes:
        return bytes(self.rng.getrandbits(8) for _ in range(16))

    def _fresh_secret(self) -> bytes:
        return bytes(self.rng.getrandbits(8) for _ in range(32))

    # -- time ------------------------------------------------------------------

    def tick(self, n: int = 1) -> list[dict]:
        """Advance the platform clock; drives provisioning pipelines and the
        inner schedulers of running work environments."""
        emitted: list[dict] = []
        for _ in range(n):
            events = self.host_sched.tick(1)
            for ev in events:
                entry = {"tick": ev.tick, "kind": "host_job",
                         "event": ev.event, "job": ev.job}
                self.platform_log.append(entry)
                emitted.append(entry)
                self.mgmt_chain.append(self.clock, Category.SYSLOG, "system",
                                       f"host job {ev.job} {ev.event}")
                env = self.prov.env_of_host_job(ev.job)
                if env is None:
                    continue
                if ev.event == "start":
                    self.prov.on_host_job_started(env)
                elif ev.event in ("expire", "complete") and \
                        env.phase is not Phase.DESTROYED:
                    self.prov.destroy_environment(env.id)
            for env in list(self.prov.environments.values()):
                if env.kind is EnvKind.WORK and env.phase is Phase.RUNNING \
                        and env.inner is not None:
                    for ev in env.inner.tick(1):
                        entry = {"tick": self.clock, "kind": "inner_job",
                                 "env": env.id, "project": env.project,
                                 "event": ev.event, "job": ev.job}
                        self.platform_log.append(entry)
                        emitted.append(entry)
                        self.mgmt_chain.append(
                            self.clock, Category.SYSLOG, "system",
                            f"inner job {ev.job} {ev.event} in {env.id}")
        return emitted

    # -- projects and owners ------------------------------------------------------

    def register_owner(self, owner: str) -> None:
        if owner in self.owners:
            return
        dm = Principal(f"dm-{owner}", PrincipalClass.DATA_MANAGER, owner)
        self.principals[dm.id] = dm
        self.fs.mkdir(f"/owners/{owner}", owner="system",
                      perms={datamanager_key(owner): RL})
        self.fs.mkdir(f"/owners/{owner}/staging", owner="system",
                      perms={datamanager_key(owner): RWL, "ttp": RL})
        key = PseudonymKey(f"key-owner-{owner}", self._fresh_secret(),
                           KeyScope("owner", owner))
        self.keys[key.id] = key
        self.owners[owner] = {"key": key.id, "data_manager": dm.id}
        self._admin("system", f"owner {owner} registered")

    def create_project(self, name: str, owner: str = "dataowner",
                       site: str = "remote-site") -> str:
        if name in self.projects:
            raise InvalidSpec(f"project {name} already exists")
        self.register_owner(owner)
        researcher = Principal(f"res-{name}", PrincipalClass.RESEARCHER, name)
        self.principals[researcher.id] = researcher
        root_acl = {researcher_key(name): RL}
        self.fs.mkdir(f"/projects/{name}", owner="system", perms=root_acl)
        self.fs.mkdir(f"/projects/{name}/data", owner="system",
                      perms={researcher_key(name): RWL, "ttp": RWL})
        self.fs.mkdir(f"/projects/{name}/staging", owner="system",
                      perms={researcher_key(name): RWL, "ttp": RL})
        key = PseudonymKey(f"key-project-{name}", self._fresh_secret(),
                           KeyScope("project", name))
        self.keys[key.id] = key
        self.projects[name] = {
            "owner": owner, "site": site, "researcher": researcher.id,
            "key": key.id,
        }
        self.meta.put(f"/projects/{name}", json.dumps(
            {"project": name, "owner": owner, "site": site},
            sort_keys=True).encode("utf-8"))
        self._admin("system", f"project {name} created (owner {owner})")
        return name

    def project(self, name: str) -> dict:
        if name not in self.projects:
            raise NotFound(f"project {name}")
        return self.projects[name]

    def wipe_project(self, name: str) -> WipeReport:
        record = self.project(name)
        report = WipeReport(subject=name)
        for env in self.prov.active(name):
            if env.kind is EnvKind.WORK:
                report.deleted_paths.extend(
                    self.prov.destroy_environment(env.id).deleted_paths)
        for env in self.prov.active(name):  # computes without a work env
            report.deleted_paths.extend(
                self.prov.destroy_environment(env.id).deleted_paths)
        fs_report = self.fs.wipe_project(name)
        report.deleted_paths.extend(fs_report.deleted_paths)
        del self.projects[name]
        self._admin(record["researcher"],
                    f"project {name} wiped, {len(report.deleted_paths)} paths removed")
        return report

    # -- environments ------------------------------------------------------------

    def launch_environment(self, scope: str, kind: EnvKind,
                           vm_count: int | None = None,
                           cores: int | None = None,
                           memory_gb: int | None = None,
                           walltime_ticks: int | None = None,
                           manual_phases: bool = False) -> str:
        if kind in (EnvKind.WORK, EnvKind.COMPUTE):
            record = self.project(scope)
            owner_principal = record["researcher"]
            site = record["site"] if kind is EnvKind.WORK else None
        elif kind is EnvKind.DATA_MANAGER:
            if scope not in self.owners:
                raise NotFound(f"data owner {scope}")
            owner_principal = self.owners[scope]["data_manager"]
            site = None
        else:
            owner_principal = "system"
            site = None
        env_id = self.prov.launch_environment(
            scope, kind, vm_count=vm_count, cores=cores, memory_gb=memory_gb,
            walltime_ticks=walltime_ticks, owner_principal=owner_principal,
            site=site, manual_phases=manual_phases)
        self._admin(owner_principal, f"environment {env_id} launch requested")
        return env_id

    def destroy_environment(self, env_id: str) -> WipeReport:
        env = self.prov.env(env_id)
        report = self.prov.destroy_environment(env_id)
        self._admin(env.owner_principal, f"environment {env_id} destroyed")
        return report

    def join(self, work_env_id: str, compute_env_id: str) -> None:
        work = self.prov.env(work_env_id)
        compute = self.prov.env(compute_env_id)
        new_net = join_environments(self.net, work, compute)
        self._set_net(new_net)
        if work.inner is not None:
            for vm in compute.vms:
                work.inner.add_node(Node(id=vm.id, cores=vm.cores,
                                         memory_gb=vm.memory_gb))
        compute.joined_into = work.id
        self.mgmt_chain.append(self.clock, Category.SYSLOG, "system",
                               f"environment {compute_env_id} joined {work_env_id}")

    def _set_net(self, net: NetState) -> None:
        self.net = net
        self.prov.net = net

    # -- inner jobs ----------------------------------------------------------------

    def submit_inner_job(self, project: str, spec: JobSpec) -> str:
        env = self.prov.work_env(project)
        if env is None:
            raise NotFound(f"project {project} has no work environment")
        if env.inner is None:
            raise InvalidPhase(f"work environment {env.id} is not allocated yet")
        job_id = env.inner.submit_job(spec)
        self.mgmt_chain.append(self.clock, Category.SYSLOG,
                               self.project(project)["researcher"],
                               f"inner job {job_id} submitted in {env.id}")
        return job_id

    def cancel_inner_job(self, project: str, job_id: str):
        env = self.prov.work_env(project)
        if env is None or env.inner is None:
            raise NotFound(f"project {project} has no work environment")
        job = env.inner.cancel_job(job_id)
        self.mgmt_chain.append(self.clock, Category.SYSLOG,
                               self.project(project)["researcher"],
                               f"inner job {job_id} cancelled in {env.id}")
        return job

    # -- isolation ---------------------------------------------------------------

    def verify_isolation(self) -> list[Violation]:
        return verify_isolation(self.net, self.prov.phases())

    def reach(self, src: str, dst: str, channel: Channel) -> bool:
        return self.net.reachable(src, dst, channel)

    # -- data movement --------------------------------------------------------------

    def import_via_vpn(self, project: str, site: str, authenticated: bool,
                       name: str, payload: bytes,
                       principal_id: str | None = None) -> str:
        record = self.project(project)
        principal_id = principal_id or record["researcher"]
        principal = self.principal(principal_id)
        if not authenticated:
            self.mgmt_chain.append(self.clock, Category.AUTH, principal_id,
                                   f"vpn session from {site} rejected: no MFA")
            raise NotAuthenticated(f"session from {site} lacks MFA")
        self.mgmt_chain.append(self.clock, Category.AUTH, principal_id,
                               f"vpn session from {site} authenticated")
        work = self.prov.work_env(project)
        work_host = work.vms[0].id if work is not None and work.vms else None
        if work_host is None or not (
                (site, work_host) in self.net.vpn_edges
                or (work_host, site) in self.net.vpn_edges):
            raise NoVpnEdge(f"no tunnel from {site} to a work host of {project}")
        if principal.cls is PrincipalClass.DATA_MANAGER:
            dest = f"/owners/{principal.scope}/staging/{name}"
        else:
            dest = f"/projects/{project}/staging/{name}"
        self.fs.access(principal, dest, FsOp.WRITE, payload)
        self._admin(principal_id, f"import {dest} from {site} ({len(payload)} bytes)")
        return dest

    def stage_dataset(self, scope_kind: str, scope: str, name: str,
                      text: str, principal_id: str | None = None) -> str:
        if scope_kind == "owner":
            if scope not in self.owners:
                raise NotFound(f"data owner {scope}")
            principal_id = principal_id or self.owners[scope]["data_manager"]
            dest = f"/owners/{scope}/staging/{name}"
        else:
            principal_id = principal_id or self.project(scope)["researcher"]
            dest = f"/projects/{scope}/staging/{name}"
        self.fs.access(self.principal(principal_id), dest, FsOp.WRITE,
                       text.encode("utf-8"))
        self._admin(principal_id, f"dataset staged at {dest}")
        return dest

    def ttp_link(self, project: str, owner: str, owner_file: str,
                 project_file: str, out_name: str,
                 caller_id: str = "ttp", salt: bytes | None = None) -> str:
        record = self.project(project)
        caller = self.principal(caller_id)
        if caller.cls is not PrincipalClass.TTP:
            raise NotTtp(f"{caller_id} is not the trusted third party")
        owner_path = f"/owners/{owner}/staging/{owner_file}"
        project_path = f"/projects/{project}/staging/{project_file}"
        owner_text = self.fs.access(caller, owner_path, FsOp.READ).decode("utf-8")
        project_text = self.fs.access(caller, project_path, FsOp.READ).decode("utf-8")
        key = self.keys[record["key"]]
        if salt is None:
            salt = self._fresh_salt()
        linked = flows.link_datasets(owner_text, project_text, key, salt, caller)
        out_path = f"/projects/{project}/data/{out_name}"
        self.fs.access(caller, out_path, FsOp.WRITE, linked.encode("utf-8"),
                       perms={researcher_key(project): RL, "ttp": RWL})
        # move semantics: the staged inputs are consumed, so raw identifiers
        # do not linger anywhere a project principal can read
        self.fs.delete_subtree(owner_path)
        self.fs.delete_subtree(project_path)
        self._admin(caller_id,
                    f"linkage {owner_path} x {project_path} -> {out_path}")
        return out_path

    # -- exports -----------------------------------------------------------------

    def request_export(self, project: str, artifact_path: str,
                       requester_id: str | None = None) -> TransferRequest:
        record = self.project(project)
        requester_id = requester_id or record["researcher"]
        if not artifact_path.startswith(f"/projects/{project}/"):
            raise NotFound(f"{artifact_path} is not under project {project}")
        if not self.fs.exists(artifact_path):
            raise NotFound(artifact_path)
        content = self.fs.access(SYSTEM, artifact_path, FsOp.READ)
        self._request_seq += 1
        req = TransferRequest(
            id=f"req-{self._request_seq}", project=project,
            direction=Direction.EXPORT, payload_path=artifact_path)
        req.submit(run_disclosure_check(content.decode("utf-8", "replace")))
        self.requests[req.id] = req
        flags = len(req.auto_check.flagged_rows)
        self.mgmt_chain.append(
            self.clock, Category.EXPORT, requester_id,
            f"request {req.id} submitted for {artifact_path} "
            f"(auto-check flagged {flags} rows)")
        return req

    def review_export(self, request_id: str, reviewer_id: str,
                      approve: bool) -> TransferRequest:
        req = self._request(request_id)
        reviewer = self.principal(reviewer_id)
        req.review(reviewer, approve)
        self.mgmt_chain.append(
            self.clock, Category.EXPORT, reviewer_id,
            f"request {req.id} {req.state.value.lower()} by {reviewer_id}")
        return req

    def release_export(self, request_id: str) -> OutboxRecord:
        req = self._request(request_id)
        req.mark_released()
        content = self.fs.access(SYSTEM, req.payload_path, FsOp.READ)
        basename = req.payload_path.rsplit("/", 1)[-1]
        outbox_dir = f"/outbox/{req.id}"
        record = self.projects.get(req.project, {})
        acl = {researcher_key(req.project): RL}
        owner = record.get("owner")
        if owner:
            acl[datamanager_key(owner)] = RL
        self.fs.mkdir(outbox_dir, owner="system", perms=acl)
        outbox_path = f"{outbox_dir}/{basename}"
        self.fs.access(SYSTEM, outbox_path, FsOp.WRITE, content, perms=acl)
        rec = OutboxRecord(req.id, req.payload_path, outbox_path)
        self.outbox.append(rec)
        self.mgmt_chain.append(self.clock, Category.EXPORT, req.reviewer or "system",
                               f"request {req.id} released to {outbox_path}")
        return rec

    def _request(self, request_id: str) -> TransferRequest:
        if request_id not in self.requests:
            raise NotFound(f"request {request_id}")
        return self.requests[request_id]

    # -- snapshots ----------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "rng_state": _rng_state_to_json(self.rng.getstate()),
            "mgmt_chain": self.mgmt_chain.to_dict(),
            "fs_chain": self.fs_chain.to_dict(),
            "host_sched": self.host_sched.to_dict(),
            "meta": self.meta.to_dict(),
            "net": self.net.to_dict(),
            "fs": self.fs.to_dict(),
            "prov": self.prov.to_dict(),
            "platform_log": list(self.platform_log),
            "principals": {pid: p.to_dict() for pid, p in self.principals.items()},
            "projects": self.projects,
            "owners": self.owners,
            "keys": {kid: k.to_dict() for kid, k in self.keys.items()},
            "requests": {rid: r.to_dict() for rid, r in self.requests.items()},
            "outbox": [r.to_dict() for r in self.outbox],
            "request_seq": self._request_seq,
            "pilot_mode": self.prov.pilot_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Platform":
        platform = cls(nodes=[], seed=d["seed"], bootstrap=False)
        platform.rng.setstate(_rng_state_from_json(d["rng_state"]))
        platform.mgmt_chain = AuditChain.from_dict(d["mgmt_chain"])
        platform.fs_chain = AuditChain.from_dict(d["fs_chain"])
        platform.host_sched = SchedulerState.from_dict(d["host_sched"])
        platform.meta = MetadataStore.from_dict(d["meta"])
        platform.net = NetState.from_dict(d["net"])
        platform.fs = SecureFs.from_dict(d["fs"], platform.fs_chain,
                                         lambda: platform.clock)
        platform.platform_log = list(d["platform_log"])
        platform.prov = Provisioner(
            platform.host_sched, platform.meta, platform.net, platform.fs,
            platform.mgmt_chain, lambda: platform.clock, platform.platform_log)
        platform.prov.load_dict(d["prov"])
        platform.principals = {pid: Principal.from_dict(p)
                               for pid, p in d["principals"].items()}
        platform.projects = d["projects"]
        platform.owners = d["owners"]
        platform.keys = {kid: PseudonymKey.from_dict(k)
                         for kid, k in d["keys"].items()}
        platform.requests = {rid: TransferRequest.from_dict(r)
                             for rid, r in d["requests"].items()}
        platform.outbox = [OutboxRecord.from_dict(r) for r in d["outbox"]]
        platform._request_seq = d["request_seq"]
        platform.prov.pilot_mode = d["pilot_mode"]
        return platform

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str) -> "Platform":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _rng_state_to_json(state) -> list:
    version, internal, gauss = state
    return [version, list(internal), gauss]


def _rng_state_from_json(data) -> tuple:
    version, internal, gauss = data
    return (version, tuple(internal), gauss)
