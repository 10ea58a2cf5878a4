"""Virtual-cluster lifecycle.

Environments are carried by host scheduler jobs (Service jobs for the
long-lived kinds, Batch jobs for compute sandboxes). Once the host job is
allocated, the VMs are created, the cluster record lands in the metadata
store, and the environment walks the phase ladder: init, configuration
pulled from the management environment, firewall lockdown, running.
Teardown cancels the host job and clears everything the VMs stored
outside persistent project storage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .audit import AuditChain, Category
from .errors import (
    DuplicateDataManagerEnv, DuplicateWorkEnv, InvalidPhase, InvalidSpec,
    NotFound, NoWorkEnv,
)
from .hostsched import JobKind, JobSpec, JobState, Node, SchedulerState
from .lifecycle import EnvKind, Phase
from .metastore import MetadataStore
from .netmodel import (
    STORAGE_PARTITION, HostKind, Membership, NetState, PartitionKind,
)
from .securefs import RWL, SecureFs, StorageClass, WipeReport, researcher_key

CONFIG_MASTER_HOST = "config-master"
SYSLOG_SINK_HOST = "syslog-sink"

WORK_VM_CORES = 4
WORK_VM_MEMORY_GB = 16

# applied to every tenant environment during configuration
DEFAULT_CONFIG_MANIFEST = {
    "accounts": ["project-user"],
    "software": ["compiler-suite", "mpi-stack", "stats-env"],
    "firewall": ["default-deny", "allow-syslog", "allow-storage"],
}


@dataclass
class Vm:
    id: str
    host_node: str
    cores: int
    memory_gb: int
    exclusive: bool
    ephemeral_data: set[str] = field(default_factory=set)

    @property
    def scratch_root(self) -> str:
        return f"/vm/{self.id}"

    def to_dict(self) -> dict:
        return {
            "id": self.id, "host_node": self.host_node, "cores": self.cores,
            "memory_gb": self.memory_gb, "exclusive": self.exclusive,
            "ephemeral_data": sorted(self.ephemeral_data),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vm":
        return cls(d["id"], d["host_node"], d["cores"], d["memory_gb"],
                   d["exclusive"], set(d["ephemeral_data"]))


@dataclass
class Environment:
    id: str
    project: str  # project name, data-owner name, or "platform"
    kind: EnvKind
    phase: Phase = Phase.REQUESTED
    host_job: str | None = None
    vms: list[Vm] = field(default_factory=list)
    owner_principal: str = "system"
    site: str | None = None
    manual_phases: bool = False
    applied_config: dict | None = None
    joined_into: str | None = None
    inner: SchedulerState | None = None
    pending_size: tuple[int, int, int] | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id, "project": self.project, "kind": self.kind.value,
            "phase": self.phase.label, "host_job": self.host_job,
            "vms": [vm.to_dict() for vm in self.vms],
            "owner_principal": self.owner_principal, "site": self.site,
            "manual_phases": self.manual_phases,
            "applied_config": self.applied_config,
            "joined_into": self.joined_into,
            "inner": self.inner.to_dict() if self.inner else None,
            "pending_size": list(self.pending_size) if self.pending_size else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        from .lifecycle import PHASE_BY_LABEL

        env = cls(d["id"], d["project"], EnvKind(d["kind"]))
        env.phase = PHASE_BY_LABEL[d["phase"]]
        env.host_job = d["host_job"]
        env.vms = [Vm.from_dict(v) for v in d["vms"]]
        env.owner_principal = d["owner_principal"]
        env.site = d["site"]
        env.manual_phases = d["manual_phases"]
        env.applied_config = d["applied_config"]
        env.joined_into = d["joined_into"]
        env.inner = SchedulerState.from_dict(d["inner"]) if d["inner"] else None
        env.pending_size = tuple(d["pending_size"]) if d["pending_size"] else None
        return env


class Provisioner:
    def __init__(self, host_sched: SchedulerState, meta: MetadataStore,
                 net: NetState, fs: SecureFs, mgmt_chain: AuditChain,
                 clock, platform_log: list):
        self.host_sched = host_sched
        self.meta = meta
        self.net = net
        self.fs = fs
        self.mgmt_chain = mgmt_chain
        self.clock = clock
        self.platform_log = platform_log
        self.environments: dict[str, Environment] = {}
        self._kind_seq: dict[tuple[str, str], int] = {}
        self.pilot_mode = False  # cap work environments at the batch limit

    # -- queries ---------------------------------------------------------------

    def env(self, env_id: str) -> Environment:
        if env_id not in self.environments:
            raise NotFound(f"environment {env_id}")
        return self.environments[env_id]

    def active(self, project: str | None = None,
               kind: EnvKind | None = None) -> list[Environment]:
        return [
            e for e in self.environments.values()
            if e.phase is not Phase.DESTROYED
            and (project is None or e.project == project)
            and (kind is None or e.kind is kind)
        ]

    def env_of_host_job(self, job_id: str) -> Environment | None:
        for env in self.environments.values():
            if env.host_job == job_id:
                return env
        return None

    def phases(self) -> dict[str, Phase]:
        return {e.id: e.phase for e in self.environments.values()}

    def work_env(self, project: str) -> Environment | None:
        envs = self.active(project, EnvKind.WORK)
        return envs[0] if envs else None

    # -- launch ------------------------------------------------------------------

    def launch_environment(self, project: str, kind: EnvKind,
                           vm_count: int | None = None,
                           cores: int | None = None,
                           memory_gb: int | None = None,
                           walltime_ticks: int | None = None,
                           owner_principal: str = "system",
                           site: str | None = None,
                           manual_phases: bool = False) -> str:
        if kind is EnvKind.WORK:
            if self.work_env(project) is not None:
                raise DuplicateWorkEnv(f"project {project} already has a work environment")
        elif kind is EnvKind.COMPUTE:
            work = self.work_env(project)
            if work is None:
                raise NoWorkEnv(f"project {project} has no work environment")
        elif kind is EnvKind.DATA_MANAGER:
            if self.active(project, EnvKind.DATA_MANAGER):
                raise DuplicateDataManagerEnv(
                    f"data owner {project} already has a data manager environment")
        elif kind is EnvKind.MANAGEMENT:
            if any(e.kind is EnvKind.MANAGEMENT for e in self.active()):
                raise InvalidSpec("the management environment already exists")

        node_cores = self.host_sched.nodes[0].cores if self.host_sched.nodes else 32
        if kind is EnvKind.COMPUTE:
            vm_count = vm_count or 1
            cores = cores or node_cores
            memory_gb = memory_gb or self.host_sched.nodes[0].memory_gb
            spec = JobSpec(JobKind.BATCH, vm_count, cores, exclusive=True,
                           walltime_ticks=walltime_ticks or 120)
        else:
            vm_count = 2 if kind is EnvKind.MANAGEMENT else 1
            cores = cores or WORK_VM_CORES
            memory_gb = memory_gb or WORK_VM_MEMORY_GB
            if cores >= node_cores:
                raise InvalidSpec(
                    f"{kind.value} VMs must use a node fraction (< {node_cores} cores)")
            if self.pilot_mode and kind is EnvKind.WORK:
                spec = JobSpec(JobKind.BATCH, vm_count, cores,
                               walltime_ticks=walltime_ticks or 120)
            else:
                spec = JobSpec(JobKind.SERVICE, vm_count, cores,
                               walltime_ticks=walltime_ticks)

        seq_key = (project, kind.value)
        seq = self._kind_seq.get(seq_key, 0) + 1
        self._kind_seq[seq_key] = seq
        env_id = f"{project}-{kind.value.lower()}{seq}"

        job_id = self.host_sched.submit_job(spec)
        env = Environment(id=env_id, project=project, kind=kind,
                          host_job=job_id, owner_principal=owner_principal,
                          site=site, manual_phases=manual_phases)
        env.pending_size = (vm_count, cores, memory_gb)
        self.environments[env_id] = env
        self._syslog(f"environment {env_id} requested as host job {job_id}")
        return env_id

    # -- phase machine --------------------------------------------------------------

    def advance_phase(self, env_id: str) -> Environment:
        env = self.env(env_id)
        if env.phase in (Phase.DESTROYING, Phase.DESTROYED):
            raise InvalidPhase(f"{env_id} is {env.phase.label}")
        if env.phase is Phase.RUNNING:
            raise InvalidPhase(f"{env_id} is already Running")
        nxt = Phase(env.phase + 1)
        condition = {
            Phase.ALLOCATED: self._can_allocate,
            Phase.INITIALIZING: self._can_initialize,
            Phase.CONFIGURED: self._can_configure,
            Phase.LOCKED_DOWN: lambda e: True,
            Phase.RUNNING: lambda e: True,
        }[nxt]
        if not condition(env):
            raise InvalidPhase(
                f"{env_id} cannot advance to {nxt.label}: condition not met")
        enter = {
            Phase.ALLOCATED: self._enter_allocated,
            Phase.INITIALIZING: lambda e: None,
            Phase.CONFIGURED: self._enter_configured,
            Phase.LOCKED_DOWN: self._enter_locked_down,
            Phase.RUNNING: lambda e: None,
        }[nxt]
        enter(env)
        env.phase = nxt
        self._syslog(f"environment {env_id} entered {nxt.label}")
        self.platform_log.append(
            {"tick": self.clock(), "kind": "phase",
             "env": env_id, "phase": nxt.label})
        return env

    def _can_allocate(self, env: Environment) -> bool:
        return self.host_sched.jobs[env.host_job].state is JobState.RUNNING

    def _can_initialize(self, env: Environment) -> bool:
        return self.meta.exists(f"/clusters/{env.id}")

    def _can_configure(self, env: Environment) -> bool:
        if env.kind is EnvKind.MANAGEMENT:
            return True  # the configuration master configures itself
        return any(e.kind is EnvKind.MANAGEMENT and e.phase >= Phase.CONFIGURED
                   for e in self.active())

    def _enter_allocated(self, env: Environment) -> None:
        job = self.host_sched.jobs[env.host_job]
        vm_count, cores, memory_gb = env.pending_size
        for i, node_id in enumerate(job.allocated_nodes[:vm_count], start=1):
            if env.kind is EnvKind.MANAGEMENT:
                vm_id = CONFIG_MASTER_HOST if i == 1 else SYSLOG_SINK_HOST
            else:
                vm_id = f"{env.id}-vm{i}"
            vm = Vm(id=vm_id, host_node=node_id, cores=cores,
                    memory_gb=memory_gb, exclusive=job.exclusive)
            env.vms.append(vm)
        self._register_network(env)
        self._create_scratch(env)
        record = json.dumps({
            "env": env.id, "kind": env.kind.value, "project": env.project,
            "vms": [vm.to_dict() for vm in env.vms],
        }, sort_keys=True).encode("utf-8")
        self.meta.put(f"/clusters/{env.id}", record)

    def _register_network(self, env: Environment) -> None:
        net = self.net
        storage = net.ib_partitions[STORAGE_PARTITION]
        overlay_id = f"ov-{env.id}"
        net.create_overlay(overlay_id, env.project, env.id)
        if env.kind in (EnvKind.WORK, EnvKind.COMPUTE):
            net.create_partition(f"ibc-{env.id}", PartitionKind.PROJECT_COMPUTE, env.id)
        for vm in env.vms:
            kind = HostKind.VM
            if vm.id == CONFIG_MASTER_HOST:
                kind = HostKind.CONFIG_MASTER
            elif vm.id == SYSLOG_SINK_HOST:
                kind = HostKind.SYSLOG_SINK
            net.add_host(vm.id, kind, project=env.project, env_id=env.id,
                         env_kind=env.kind)
            net.overlays[overlay_id].members.add(vm.id)
            if env.kind in (EnvKind.WORK, EnvKind.COMPUTE):
                net.ib_partitions[f"ibc-{env.id}"].members[vm.id] = Membership.FULL
            if env.kind is not EnvKind.MANAGEMENT:
                storage.members[vm.id] = Membership.LIMITED
                net.set_mgmt_edge(vm.id, CONFIG_MASTER_HOST, enabled=True)
                net.set_mgmt_edge(vm.id, SYSLOG_SINK_HOST, enabled=True)
        if env.kind is EnvKind.WORK and env.site:
            if env.site not in net.hosts:
                net.add_host(env.site, HostKind.REMOTE_SITE)
            net.enroll_vpn(env.site, env.vms[0].id)
        if env.kind is EnvKind.WORK:
            env.inner = SchedulerState(
                [Node(id=vm.id, cores=vm.cores, memory_gb=vm.memory_gb)
                 for vm in env.vms],
                id_prefix=f"{env.project}-job",
            )

    def _create_scratch(self, env: Environment) -> None:
        acl = {researcher_key(env.project): RWL}
        for vm in env.vms:
            self.fs.mkdir(f"{vm.scratch_root}/scratch", owner="system",
                          perms=acl, storage_class=StorageClass.VM_EPHEMERAL)

    def _enter_configured(self, env: Environment) -> None:
        env.applied_config = json.loads(json.dumps(DEFAULT_CONFIG_MANIFEST))

    def _enter_locked_down(self, env: Environment) -> None:
        self.net.lockdown([vm.id for vm in env.vms], CONFIG_MASTER_HOST)

    def provision_to_running(self, env_id: str) -> Environment:
        env = self.env(env_id)
        while env.phase < Phase.RUNNING:
            self.advance_phase(env_id)
        return env

    def on_host_job_started(self, env: Environment) -> None:
        if env.phase is not Phase.REQUESTED:
            return
        self.advance_phase(env.id)  # Requested -> Allocated
        if not env.manual_phases:
            self.provision_to_running(env.id)

    # -- teardown ------------------------------------------------------------------

    def destroy_environment(self, env_id: str) -> WipeReport:
        env = self.env(env_id)
        if env.phase is Phase.DESTROYED:
            raise InvalidPhase(f"{env_id} is already Destroyed")
        if env.kind is EnvKind.MANAGEMENT:
            raise InvalidPhase("the management environment is permanent")
        report = WipeReport(subject=env_id)
        if env.kind is EnvKind.WORK:
            for compute in self.active(env.project, EnvKind.COMPUTE):
                sub = self.destroy_environment(compute.id)
                report.deleted_paths.extend(sub.deleted_paths)
        env.phase = Phase.DESTROYING
        job = self.host_sched.jobs.get(env.host_job)
        if job is not None and job.state in (JobState.QUEUED, JobState.RUNNING):
            self.host_sched.cancel_job(env.host_job)
        if env.joined_into is not None:
            work = self.environments.get(env.joined_into)
            if work is not None and work.inner is not None:
                for vm in env.vms:
                    if any(n.id == vm.id for n in work.inner.nodes):
                        work.inner.remove_node(vm.id)
        for vm in env.vms:
            vm.ephemeral_data = {
                n.path for n in self.fs.subtree(vm.scratch_root)
                if not n.is_dir and n.storage_class is StorageClass.VM_EPHEMERAL
            }
            deleted = self.fs.delete_subtree(
                vm.scratch_root, storage_class=StorageClass.VM_EPHEMERAL)
            report.deleted_paths.extend(deleted)
            self.net.remove_host(vm.id)
        own_overlay = self.net.env_overlay.pop(env.id, None)
        if own_overlay == f"ov-{env.id}":
            self.net.overlays.pop(own_overlay, None)
        own_partition = self.net.env_partition.pop(env.id, None)
        if own_partition == f"ibc-{env.id}":
            self.net.ib_partitions.pop(own_partition, None)
        env.phase = Phase.DESTROYED
        self._syslog(
            f"environment {env_id} destroyed, wiped {len(report.deleted_paths)} paths")
        self.platform_log.append(
            {"tick": self.clock(), "kind": "phase",
             "env": env_id, "phase": Phase.DESTROYED.label})
        return report

    # -- misc ---------------------------------------------------------------------

    def _syslog(self, detail: str) -> None:
        self.mgmt_chain.append(self.clock(), Category.SYSLOG, "system", detail)

    def to_dict(self) -> dict:
        return {
            "environments": {eid: e.to_dict() for eid, e in self.environments.items()},
            "kind_seq": {f"{p}|{k}": v for (p, k), v in self._kind_seq.items()},
            "pilot_mode": self.pilot_mode,
        }

    def load_dict(self, d: dict) -> None:
        self.environments = {
            eid: Environment.from_dict(e) for eid, e in d["environments"].items()
        }
        self._kind_seq = {}
        for key, v in d["kind_seq"].items():
            p, _, k = key.rpartition("|")
            self._kind_seq[(p, k)] = v
        self.pilot_mode = d["pilot_mode"]
