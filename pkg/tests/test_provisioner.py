import json

import pytest

from ossc.errors import (
    DuplicateDataManagerEnv, DuplicateWorkEnv, InvalidPhase, KeyNotFound,
    NotFound, NoWorkEnv, WalltimeExceeded,
)
from ossc.hostsched import JobKind, JobSpec, JobState, default_topology
from ossc.lifecycle import EnvKind, Phase
from ossc.netmodel import Channel
from ossc.platform import Platform
from ossc.securefs import FsOp, StorageClass


@pytest.fixture
def platform():
    p = Platform(seed=7)
    p.create_project("alpha")
    p.create_project("beta")
    return p


def launch_work(p, project, **kw):
    env_id = p.launch_environment(project, EnvKind.WORK, **kw)
    p.tick(1)
    return env_id


class TestLaunch:
    def test_work_env_reaches_running(self, platform):
        env_id = launch_work(platform, "alpha")
        env = platform.prov.env(env_id)
        assert env.phase is Phase.RUNNING
        assert env.kind is EnvKind.WORK
        assert len(env.vms) == 1
        assert env.inner is not None

    def test_duplicate_work_env(self, platform):
        launch_work(platform, "alpha")
        with pytest.raises(DuplicateWorkEnv):
            platform.launch_environment("alpha", EnvKind.WORK)

    def test_compute_without_work(self, platform):
        with pytest.raises(NoWorkEnv):
            platform.launch_environment("alpha", EnvKind.COMPUTE)

    def test_duplicate_data_manager(self, platform):
        platform.launch_environment("dataowner", EnvKind.DATA_MANAGER)
        with pytest.raises(DuplicateDataManagerEnv):
            platform.launch_environment("dataowner", EnvKind.DATA_MANAGER)

    def test_compute_walltime_cap(self, platform):
        launch_work(platform, "alpha")
        with pytest.raises(WalltimeExceeded):
            platform.launch_environment("alpha", EnvKind.COMPUTE,
                                        walltime_ticks=121)

    def test_two_work_envs_share_one_node(self, platform):
        a = launch_work(platform, "alpha")
        b = launch_work(platform, "beta")
        va = platform.prov.env(a).vms[0]
        vb = platform.prov.env(b).vms[0]
        assert va.host_node == vb.host_node
        assert not va.exclusive and va.cores < 32

    def test_compute_vms_occupy_full_nodes(self, platform):
        launch_work(platform, "alpha")
        env_id = platform.launch_environment("alpha", EnvKind.COMPUTE,
                                             vm_count=2, walltime_ticks=24)
        platform.tick(1)
        env = platform.prov.env(env_id)
        assert env.phase is Phase.RUNNING
        assert len(env.vms) == 2
        nodes = {vm.host_node for vm in env.vms}
        assert len(nodes) == 2
        assert all(vm.exclusive and vm.cores == 32 for vm in env.vms)


class TestPhases:
    def test_manual_pipeline_order(self, platform):
        env_id = platform.launch_environment("alpha", EnvKind.WORK,
                                             manual_phases=True)
        env = platform.prov.env(env_id)
        assert env.phase is Phase.REQUESTED
        platform.tick(1)
        assert env.phase is Phase.ALLOCATED
        assert platform.meta.exists(f"/clusters/{env_id}")
        platform.prov.advance_phase(env_id)
        assert env.phase is Phase.INITIALIZING
        platform.prov.advance_phase(env_id)
        assert env.phase is Phase.CONFIGURED
        assert env.applied_config is not None
        # configuration channel open until lockdown
        vm = env.vms[0].id
        assert platform.reach(vm, "config-master", Channel.MGMT)
        platform.prov.advance_phase(env_id)
        assert env.phase is Phase.LOCKED_DOWN
        assert not platform.reach(vm, "config-master", Channel.MGMT)
        assert platform.reach(vm, "syslog-sink", Channel.MGMT)
        platform.prov.advance_phase(env_id)
        assert env.phase is Phase.RUNNING
        with pytest.raises(InvalidPhase):
            platform.prov.advance_phase(env_id)

    def test_advance_on_destroyed(self, platform):
        env_id = launch_work(platform, "alpha")
        platform.destroy_environment(env_id)
        with pytest.raises(InvalidPhase):
            platform.prov.advance_phase(env_id)

    def test_requested_cannot_skip_allocation(self, platform):
        env_id = platform.launch_environment("alpha", EnvKind.WORK,
                                             manual_phases=True)
        with pytest.raises(InvalidPhase):
            platform.prov.advance_phase(env_id)  # host job still queued


class TestMetadata:
    def test_cluster_record_contents(self, platform):
        env_id = launch_work(platform, "alpha")
        value, version = platform.meta.read(f"/clusters/{env_id}")
        record = json.loads(value)
        assert record["kind"] == "Work"
        assert len(record["vms"]) == 1
        assert version == 1

    def test_unknown_key(self, platform):
        with pytest.raises(KeyNotFound):
            platform.meta.read("/clusters/ghost")

    def test_last_write_wins_with_monotone_version(self, platform):
        platform.meta.put("/k", b"v1")
        platform.meta.put("/k", b"v2")
        value, version = platform.meta.read("/k")
        assert value == b"v2"
        assert version == 2

    def test_metadata_completeness(self, platform):
        launch_work(platform, "alpha")
        platform.launch_environment("alpha", EnvKind.COMPUTE, walltime_ticks=24)
        platform.tick(1)
        for env in platform.prov.environments.values():
            if env.phase >= Phase.INITIALIZING:
                assert platform.meta.exists(f"/clusters/{env.id}")


class TestDestroy:
    def test_wipe_clears_ephemeral_keeps_persistent(self, platform):
        launch_work(platform, "alpha")
        env_id = platform.launch_environment("alpha", EnvKind.COMPUTE,
                                             walltime_ticks=24)
        platform.tick(1)
        env = platform.prov.env(env_id)
        res = platform.principal("res-alpha")
        scratch = env.vms[0].scratch_root + "/scratch"
        ephemeral = [f"{scratch}/tmp{i}" for i in range(3)]
        for path in ephemeral:
            platform.fs.access(res, path, FsOp.WRITE, b"scratch data")
        persistent = [f"/projects/alpha/data/keep{i}" for i in range(2)]
        for path in persistent:
            platform.fs.access(res, path, FsOp.WRITE, b"keep")
        before = {n.path: n.content for n in platform.fs.subtree("/projects/alpha")}
        report = platform.destroy_environment(env_id)
        assert sorted(report.deleted_paths) == ephemeral
        assert env.phase is Phase.DESTROYED
        after = {n.path: n.content for n in platform.fs.subtree("/projects/alpha")}
        assert before == after
        for path in persistent:
            assert platform.fs.access(res, path, FsOp.READ) == b"keep"

    def test_empty_wipe_still_destroys(self, platform):
        env_id = launch_work(platform, "alpha")
        report = platform.destroy_environment(env_id)
        assert report.deleted_paths == []
        assert platform.prov.env(env_id).phase is Phase.DESTROYED

    def test_destroy_work_preserves_project_tree(self, platform):
        env_id = launch_work(platform, "alpha")
        res = platform.principal("res-alpha")
        platform.fs.access(res, "/projects/alpha/data/results.csv", FsOp.WRITE, b"r")
        platform.destroy_environment(env_id)
        assert platform.fs.access(res, "/projects/alpha/data/results.csv",
                                  FsOp.READ) == b"r"

    def test_destroy_work_cascades_to_compute(self, platform):
        work_id = launch_work(platform, "alpha")
        compute_id = platform.launch_environment("alpha", EnvKind.COMPUTE,
                                                 walltime_ticks=24)
        platform.tick(1)
        platform.destroy_environment(work_id)
        assert platform.prov.env(compute_id).phase is Phase.DESTROYED

    def test_destroy_unknown(self, platform):
        with pytest.raises(NotFound):
            platform.destroy_environment("ghost")

    def test_management_env_is_permanent(self, platform):
        mgmt = [e for e in platform.prov.environments.values()
                if e.kind is EnvKind.MANAGEMENT][0]
        with pytest.raises(InvalidPhase):
            platform.destroy_environment(mgmt.id)

    def test_host_job_expiry_autodestroys_compute(self, platform):
        launch_work(platform, "alpha")
        env_id = platform.launch_environment("alpha", EnvKind.COMPUTE,
                                             walltime_ticks=2)
        platform.tick(1)
        assert platform.prov.env(env_id).phase is Phase.RUNNING
        platform.tick(2)
        assert platform.prov.env(env_id).phase is Phase.DESTROYED


class TestInnerScheduler:
    def test_jobs_run_only_in_running_envs(self, platform):
        env_id = platform.launch_environment("alpha", EnvKind.WORK,
                                             manual_phases=True)
        platform.tick(1)  # Allocated
        job_id = platform.submit_inner_job(
            "alpha", JobSpec(JobKind.BATCH, 1, 2, walltime_ticks=5))
        platform.tick(3)
        env = platform.prov.env(env_id)
        assert env.inner.jobs[job_id].state is JobState.QUEUED
        platform.prov.provision_to_running(env_id)
        platform.tick(1)
        assert env.inner.jobs[job_id].state is JobState.RUNNING

    def test_no_inner_event_before_lockdown(self, platform):
        launch_work(platform, "alpha")
        platform.submit_inner_job(
            "alpha", JobSpec(JobKind.BATCH, 1, 2, walltime_ticks=3))
        platform.tick(5)
        log = platform.platform_log
        lock_index = next(
            i for i, e in enumerate(log)
            if e["kind"] == "phase" and e["env"] == "alpha-work1"
            and e["phase"] == "LockedDown")
        inner_indexes = [i for i, e in enumerate(log)
                         if e["kind"] == "inner_job" and e["env"] == "alpha-work1"]
        assert inner_indexes and min(inner_indexes) > lock_index

    def test_join_expands_inner_nodes_and_dispatch(self, platform):
        work_id = launch_work(platform, "alpha")
        compute_id = platform.launch_environment(
            "alpha", EnvKind.COMPUTE, vm_count=2, walltime_ticks=48)
        platform.tick(1)
        platform.join(work_id, compute_id)
        env = platform.prov.env(work_id)
        assert len(env.inner.nodes) == 3
        job_id = platform.submit_inner_job(
            "alpha", JobSpec(JobKind.BATCH, 2, 32, exclusive=True,
                             walltime_ticks=10, run_ticks=2))
        platform.tick(1)
        assert env.inner.jobs[job_id].state is JobState.RUNNING
        platform.tick(2)
        assert env.inner.jobs[job_id].state is JobState.COMPLETED

    def test_compute_destroy_removes_inner_nodes(self, platform):
        work_id = launch_work(platform, "alpha")
        compute_id = platform.launch_environment(
            "alpha", EnvKind.COMPUTE, vm_count=1, walltime_ticks=48)
        platform.tick(1)
        platform.join(work_id, compute_id)
        platform.destroy_environment(compute_id)
        env = platform.prov.env(work_id)
        assert len(env.inner.nodes) == 1
        assert env.inner.nodes[0].id.startswith("alpha-work1")


class TestPilotMode:
    def test_work_env_capped_in_pilot_mode(self):
        p = Platform(seed=1, pilot_mode=True)
        p.create_project("alpha")
        env_id = p.launch_environment("alpha", EnvKind.WORK)
        p.tick(1)
        env = p.prov.env(env_id)
        job = p.host_sched.jobs[env.host_job]
        assert job.kind is JobKind.BATCH
        assert job.walltime_ticks == 120
        p.tick(120)
        assert env.phase is Phase.DESTROYED  # expired with the host job

    def test_service_mode_keeps_work_env_alive(self, platform):
        env_id = launch_work(platform, "alpha")
        platform.tick(200)
        assert platform.prov.env(env_id).phase is Phase.RUNNING


class TestIsolationOnPlatformStates:
    def test_full_session_stays_clean(self, platform):
        launch_work(platform, "alpha")
        launch_work(platform, "beta")
        c = platform.launch_environment("alpha", EnvKind.COMPUTE,
                                        vm_count=1, walltime_ticks=48)
        platform.tick(1)
        platform.join("alpha-work1", c)
        platform.launch_environment("dataowner", EnvKind.DATA_MANAGER)
        platform.tick(1)
        assert platform.verify_isolation() == []
        assert not platform.reach("alpha-work1-vm1", "beta-work1-vm1",
                                  Channel.OVERLAY_ETHERNET)

    def test_snapshot_round_trip(self, platform):
        launch_work(platform, "alpha")
        c = platform.launch_environment("alpha", EnvKind.COMPUTE,
                                        walltime_ticks=24)
        platform.tick(1)
        platform.join("alpha-work1", c)
        clone = Platform.from_dict(platform.to_dict())
        assert clone.to_dict() == platform.to_dict()
        clone.tick(2)
        platform.tick(2)
        assert clone.platform_log == platform.platform_log
