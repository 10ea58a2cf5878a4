"""Discrete-tick batch scheduler.

One engine serves two roles: the host cluster scheduler that carries the
virtual-cluster jobs, and the inner per-project scheduler that dispatches
user jobs onto a project's VMs. Time advances in whole ticks (1 tick =
1 hour); scheduling is FIFO first-fit without backfill, so identical
inputs always produce identical event logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .errors import AlreadyTerminal, CapacityExceeded, InvalidSpec, NotFound, WalltimeExceeded

# 5-day lifespan policy at 1 tick = 1 hour.
MAX_WALLTIME_TICKS = 120

DEFAULT_NODE_CORES = 32
DEFAULT_NODE_MEMORY_GB = 64


class NodeState(Enum):
    FREE = "Free"
    PARTIALLY_ALLOCATED = "PartiallyAllocated"
    FULLY_ALLOCATED = "FullyAllocated"
    DOWN = "Down"


class JobKind(Enum):
    SERVICE = "Service"
    BATCH = "Batch"


class JobState(Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    COMPLETED = "Completed"
    CANCELLED = "Cancelled"
    EXPIRED = "Expired"


TERMINAL_STATES = {JobState.COMPLETED, JobState.CANCELLED, JobState.EXPIRED}


@dataclass
class Node:
    id: str
    cores: int
    memory_gb: int
    # job id -> cores held on this node
    allocations: dict[str, int] = field(default_factory=dict)
    exclusive_holder: str | None = None
    down: bool = False

    @property
    def allocated_cores(self) -> int:
        return sum(self.allocations.values())

    @property
    def free_cores(self) -> int:
        return self.cores - self.allocated_cores

    @property
    def state(self) -> NodeState:
        if self.down:
            return NodeState.DOWN
        if not self.allocations:
            return NodeState.FREE
        if self.exclusive_holder is not None or self.free_cores == 0:
            return NodeState.FULLY_ALLOCATED
        return NodeState.PARTIALLY_ALLOCATED

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "cores": self.cores,
            "memory_gb": self.memory_gb,
            "allocations": dict(self.allocations),
            "exclusive_holder": self.exclusive_holder,
            "down": self.down,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(
            id=d["id"], cores=d["cores"], memory_gb=d["memory_gb"],
            allocations=dict(d["allocations"]),
            exclusive_holder=d["exclusive_holder"], down=d["down"],
        )


@dataclass
class JobSpec:
    kind: JobKind
    nodes_requested: int
    cores_per_node: int
    exclusive: bool = False
    # None means unlimited (Service jobs only)
    walltime_ticks: int | None = None
    # Modeled workload duration; the job completes once it has run this many
    # ticks. None means it runs until walltime expiry or cancellation.
    run_ticks: int | None = None


@dataclass
class Job:
    id: str
    kind: JobKind
    nodes_requested: int
    cores_per_node: int
    exclusive: bool
    walltime_ticks: int | None
    run_ticks: int | None
    state: JobState = JobState.QUEUED
    allocated_nodes: list[str] = field(default_factory=list)
    submit_tick: int = 0
    start_tick: int | None = None
    end_tick: int | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "nodes_requested": self.nodes_requested,
            "cores_per_node": self.cores_per_node,
            "exclusive": self.exclusive,
            "walltime_ticks": self.walltime_ticks,
            "run_ticks": self.run_ticks,
            "state": self.state.value,
            "allocated_nodes": list(self.allocated_nodes),
            "submit_tick": self.submit_tick,
            "start_tick": self.start_tick,
            "end_tick": self.end_tick,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Job":
        return cls(
            id=d["id"], kind=JobKind(d["kind"]),
            nodes_requested=d["nodes_requested"],
            cores_per_node=d["cores_per_node"], exclusive=d["exclusive"],
            walltime_ticks=d["walltime_ticks"], run_ticks=d["run_ticks"],
            state=JobState(d["state"]),
            allocated_nodes=list(d["allocated_nodes"]),
            submit_tick=d["submit_tick"], start_tick=d["start_tick"],
            end_tick=d["end_tick"],
        )


@dataclass(frozen=True)
class Event:
    tick: int
    event: str  # start | expire | complete | cancel
    job: str

    def to_dict(self) -> dict:
        return {"tick": self.tick, "event": self.event, "job": self.job}


class SchedulerState:
    """Single scheduler instance over a fixed node list."""

    def __init__(self, nodes: list[Node], id_prefix: str = "job"):
        self.clock = 0
        self.nodes: list[Node] = nodes
        self.jobs: dict[str, Job] = {}
        self.queue: list[str] = []
        self.running: set[str] = set()
        self.event_log: list[Event] = []
        self._id_prefix = id_prefix
        self._next_seq = 1

    # -- capacity ------------------------------------------------------------

    @property
    def total_cores(self) -> int:
        return sum(n.cores for n in self.nodes)

    def _node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise NotFound(f"node {node_id}")

    def add_node(self, node: Node) -> None:
        if any(n.id == node.id for n in self.nodes):
            raise InvalidSpec(f"duplicate node id {node.id}")
        self.nodes.append(node)

    def remove_node(self, node_id: str) -> list[str]:
        """Drop a node; cancels any job holding capacity on it.

        Returns the ids of the jobs that were cancelled.
        """
        node = self._node(node_id)
        victims = [jid for jid in node.allocations]
        for jid in victims:
            if self.jobs[jid].state in (JobState.QUEUED, JobState.RUNNING):
                self.cancel_job(jid)
        self.nodes = [n for n in self.nodes if n.id != node_id]
        return victims

    # -- operations ----------------------------------------------------------

    def submit_job(self, spec: JobSpec) -> str:
        if spec.nodes_requested < 1 or spec.cores_per_node < 1:
            raise InvalidSpec("nodes_requested and cores_per_node must be >= 1")
        if spec.walltime_ticks is not None and spec.walltime_ticks < 1:
            raise InvalidSpec("walltime_ticks must be >= 1")
        if spec.kind is JobKind.BATCH:
            if spec.walltime_ticks is None:
                raise InvalidSpec("Batch jobs require a finite walltime")
            if spec.walltime_ticks > MAX_WALLTIME_TICKS:
                raise WalltimeExceeded(
                    f"walltime {spec.walltime_ticks} exceeds cap of {MAX_WALLTIME_TICKS} ticks"
                )
        usable = [n for n in self.nodes if not n.down]
        if spec.nodes_requested > len(usable):
            raise CapacityExceeded(
                f"{spec.nodes_requested} nodes requested, cluster has {len(usable)}"
            )
        if not any(n.cores >= spec.cores_per_node for n in usable):
            raise CapacityExceeded(
                f"no node offers {spec.cores_per_node} cores"
            )
        job_id = f"{self._id_prefix}-{self._next_seq}"
        self._next_seq += 1
        job = Job(
            id=job_id, kind=spec.kind,
            nodes_requested=spec.nodes_requested,
            cores_per_node=spec.cores_per_node,
            exclusive=spec.exclusive,
            walltime_ticks=spec.walltime_ticks,
            run_ticks=spec.run_ticks,
            submit_tick=self.clock,
        )
        self.jobs[job_id] = job
        self.queue.append(job_id)
        return job_id

    def cancel_job(self, job_id: str) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise NotFound(f"job {job_id}")
        if job.state in TERMINAL_STATES:
            raise AlreadyTerminal(f"job {job_id} is {job.state.value}")
        if job.state is JobState.QUEUED:
            self.queue.remove(job_id)
        else:
            self._release(job)
            self.running.discard(job_id)
        job.state = JobState.CANCELLED
        job.end_tick = self.clock
        self.event_log.append(Event(self.clock, "cancel", job_id))
        return job

    def tick(self, n: int = 1) -> list[Event]:
        if n < 1:
            raise InvalidSpec("tick count must be >= 1")
        emitted: list[Event] = []
        for _ in range(n):
            self.clock += 1
            emitted.extend(self._finish_due_jobs())
            emitted.extend(self._start_queued_jobs())
        return emitted

    # -- internals -----------------------------------------------------------

    def _finish_due_jobs(self) -> list[Event]:
        events = []
        for job_id in sorted(self.running, key=lambda j: (self.jobs[j].start_tick or 0, j)):
            job = self.jobs[job_id]
            elapsed = self.clock - (job.start_tick or 0)
            if job.run_ticks is not None and elapsed >= job.run_ticks and (
                    job.walltime_ticks is None or elapsed <= job.walltime_ticks):
                self._terminate(job, JobState.COMPLETED)
                events.append(Event(self.clock, "complete", job_id))
            elif job.walltime_ticks is not None and elapsed >= job.walltime_ticks:
                self._terminate(job, JobState.EXPIRED)
                events.append(Event(self.clock, "expire", job_id))
        self.event_log.extend(events)
        return events

    def _start_queued_jobs(self) -> list[Event]:
        events = []
        for job_id in list(self.queue):
            job = self.jobs[job_id]
            placement = self._find_placement(job)
            if placement is None:
                continue  # first-fit skip; later jobs may still fit
            for node_id in placement:
                node = self._node(node_id)
                node.allocations[job_id] = job.cores_per_node
                if job.exclusive:
                    node.exclusive_holder = job_id
            job.allocated_nodes = placement
            job.state = JobState.RUNNING
            job.start_tick = self.clock
            self.queue.remove(job_id)
            self.running.add(job_id)
            events.append(Event(self.clock, "start", job_id))
        self.event_log.extend(events)
        return events

    def _find_placement(self, job: Job) -> list[str] | None:
        """First-fit: take nodes in topology order."""
        chosen = []
        for node in self.nodes:
            if node.down:
                continue
            if job.exclusive:
                if node.allocations:
                    continue
                if node.cores < job.cores_per_node:
                    continue
            else:
                if node.exclusive_holder is not None:
                    continue
                if node.free_cores < job.cores_per_node:
                    continue
            chosen.append(node.id)
            if len(chosen) == job.nodes_requested:
                return chosen
        return None

    def _terminate(self, job: Job, state: JobState) -> None:
        self._release(job)
        self.running.discard(job.id)
        job.state = state
        job.end_tick = self.clock

    def _release(self, job: Job) -> None:
        for node_id in job.allocated_nodes:
            node = self._node(node_id)
            node.allocations.pop(job.id, None)
            if node.exclusive_holder == job.id:
                node.exclusive_holder = None

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "clock": self.clock,
            "nodes": [n.to_dict() for n in self.nodes],
            "jobs": {jid: j.to_dict() for jid, j in self.jobs.items()},
            "queue": list(self.queue),
            "running": sorted(self.running),
            "event_log": [e.to_dict() for e in self.event_log],
            "id_prefix": self._id_prefix,
            "next_seq": self._next_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchedulerState":
        sched = cls([Node.from_dict(n) for n in d["nodes"]], id_prefix=d["id_prefix"])
        sched.clock = d["clock"]
        sched.jobs = {jid: Job.from_dict(j) for jid, j in d["jobs"].items()}
        sched.queue = list(d["queue"])
        sched.running = set(d["running"])
        sched.event_log = [Event(e["tick"], e["event"], e["job"]) for e in d["event_log"]]
        sched._next_seq = d["next_seq"]
        return sched


def export_events_jsonl(events: list[Event]) -> str:
    """Event log as JSON lines, stable key order."""
    return "".join(
        json.dumps({"tick": e.tick, "event": e.event, "job": e.job}) + "\n"
        for e in events
    )


def default_topology(node_count: int = 4, cores: int = DEFAULT_NODE_CORES,
                     memory_gb: int = DEFAULT_NODE_MEMORY_GB) -> list[Node]:
    return [Node(id=f"node{i}", cores=cores, memory_gb=memory_gb)
            for i in range(node_count)]


def load_topology(text: str) -> list[Node]:
    """Parse a key/value topology description.

    Recognized keys: ``nodes``, ``cores``, ``memory_gb``. Lines starting
    with ``#`` and blank lines are ignored.
    """
    values = {"nodes": 4, "cores": DEFAULT_NODE_CORES, "memory_gb": DEFAULT_NODE_MEMORY_GB}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidSpec(f"topology line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in values:
            raise InvalidSpec(f"topology line {lineno}: unknown key {key!r}")
        try:
            values[key] = int(raw.strip())
        except ValueError:
            raise InvalidSpec(f"topology line {lineno}: {key} must be an integer") from None
    if min(values.values()) < 1:
        raise InvalidSpec("topology values must be >= 1")
    return default_topology(values["nodes"], values["cores"], values["memory_gb"])
