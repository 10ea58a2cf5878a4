import random

import pytest

from ossc.errors import (
    CollisionDetected, KeyAccessDenied, NoVpnEdge, NotAuthenticated, NotFound,
    NotReviewer, NotTtp, SchemaMismatch, WrongState,
)
from ossc.audit import Category
from ossc.flows import (
    DatasetRecord, KeyScope, PseudonymKey, RequestState, emit_dataset,
    generate_dataset, link_datasets, parse_dataset, pseudonym, pseudonymize,
    run_disclosure_check,
)
from ossc.hostsched import default_topology
from ossc.lifecycle import EnvKind
from ossc.platform import Platform
from ossc.securefs import FsOp, Principal, PrincipalClass

DM = Principal("dm-owner", PrincipalClass.DATA_MANAGER, "owner")
TTP = Principal("ttp", PrincipalClass.TTP)
RES = Principal("res-alpha", PrincipalClass.RESEARCHER, "alpha")

OWNER_KEY = PseudonymKey("k-owner", b"\x01" * 32, KeyScope("owner", "owner"))
PROJECT_KEY = PseudonymKey("k-proj", b"\x02" * 32, KeyScope("project", "alpha"))


class TestPseudonymize:
    def records(self):
        return [DatasetRecord("id1", {"a": "1"}), DatasetRecord("id2", {"a": "2"})]

    def test_deterministic(self):
        out1 = pseudonymize(self.records(), OWNER_KEY, b"salt", DM)
        out2 = pseudonymize(self.records(), OWNER_KEY, b"salt", DM)
        assert [r.link_id for r in out1] == [r.link_id for r in out2]
        assert all(len(r.link_id) == 64 for r in out1)

    def test_key_separation(self):
        with_owner = pseudonym(OWNER_KEY, b"s", "id1")
        with_project = pseudonym(PROJECT_KEY, b"s", "id1")
        assert with_owner != with_project

    def test_salt_separation(self):
        assert pseudonym(OWNER_KEY, b"s1", "id1") != pseudonym(OWNER_KEY, b"s2", "id1")

    def test_attributes_unchanged(self):
        out = pseudonymize(self.records(), OWNER_KEY, b"salt", DM)
        assert [r.attributes for r in out] == [{"a": "1"}, {"a": "2"}]

    def test_empty_input(self):
        assert pseudonymize([], OWNER_KEY, b"s", DM) == []

    def test_scope_rules(self):
        with pytest.raises(KeyAccessDenied):
            pseudonymize(self.records(), OWNER_KEY, b"s", TTP)
        with pytest.raises(KeyAccessDenied):
            pseudonymize(self.records(), OWNER_KEY, b"s",
                         Principal("dm-other", PrincipalClass.DATA_MANAGER, "other"))
        with pytest.raises(KeyAccessDenied):
            pseudonymize(self.records(), PROJECT_KEY, b"s", RES)
        with pytest.raises(KeyAccessDenied):
            pseudonymize(self.records(), PROJECT_KEY, b"s", DM)
        assert pseudonymize(self.records(), PROJECT_KEY, b"s", TTP)

    def test_duplicate_id_is_not_a_collision(self):
        records = [DatasetRecord("id1", {}), DatasetRecord("id1", {})]
        out = pseudonymize(records, PROJECT_KEY, b"s", TTP)
        assert out[0].link_id == out[1].link_id


class TestCsv:
    def test_round_trip(self):
        text = "link_id,a,b\nid1,x,y\nid2,p,q\n"
        cols, records = parse_dataset(text)
        assert cols == ["a", "b"]
        assert records[0].link_id == "id1"
        assert emit_dataset("link_id", cols, records) == text

    def test_missing_link_column(self):
        with pytest.raises(SchemaMismatch):
            parse_dataset("a,b\n1,2\n")

    def test_generate_is_deterministic(self):
        a = generate_dataset(random.Random(5), 20, ["income"])
        b = generate_dataset(random.Random(5), 20, ["income"])
        assert a == b
        cols, records = parse_dataset(a)
        assert len(records) == 20
        assert len({r.link_id for r in records}) == 20


def brute_force_join(owner_text, project_text, key, salt):
    """Independent oracle: nested-loop join on raw ids, then apply the same
    digest map; returns a multiset of row tuples."""
    owner_cols, owner_records = parse_dataset(owner_text)
    project_cols, project_records = parse_dataset(project_text)
    rows = []
    for o in owner_records:
        for p in project_records:
            if o.link_id == p.link_id:
                token = pseudonym(key, salt, o.link_id)
                attrs = [o.attributes.get(c, "") for c in owner_cols]
                attrs += [p.attributes.get(c, "") for c in project_cols]
                rows.append(tuple([token] + attrs))
    return sorted(rows)


def linked_rows(csv_text):
    lines = csv_text.strip().splitlines()
    return sorted(tuple(line.split(",")) for line in lines[1:])


class TestLinkDatasets:
    def test_two_owner_rows_one_match(self):
        owner = "link_id,income\nid1,100\nid2,200\n"
        project = "link_id,survey\nid1,yes\n"
        out = link_datasets(owner, project, PROJECT_KEY, b"s", TTP)
        rows = linked_rows(out)
        assert rows == brute_force_join(owner, project, PROJECT_KEY, b"s")
        assert len(rows) == 1
        assert rows[0][0] == pseudonym(PROJECT_KEY, b"s", "id1")
        assert rows[0][1:] == ("100", "yes")

    def test_disjoint_ids_header_only(self):
        owner = "link_id,income\nid1,100\n"
        project = "link_id,survey\nid9,yes\n"
        out = link_datasets(owner, project, PROJECT_KEY, b"s", TTP)
        assert out == "pseudonym,income,survey\n"

    def test_duplicate_attribute_columns(self):
        owner = "link_id,v\nid1,1\n"
        project = "link_id,v\nid1,2\n"
        with pytest.raises(SchemaMismatch):
            link_datasets(owner, project, PROJECT_KEY, b"s", TTP)

    def test_non_ttp_caller(self):
        with pytest.raises(NotTtp):
            link_datasets("link_id\nid1\n", "link_id\nid1\n",
                          PROJECT_KEY, b"s", RES)

    def test_no_raw_id_in_output(self):
        owner = "link_id,income\nid1,100\nid2,200\n"
        project = "link_id,survey\nid1,yes\nid2,no\n"
        out = link_datasets(owner, project, PROJECT_KEY, b"s", TTP)
        for raw in ("id1", "id2"):
            assert raw not in out

    def test_matches_oracle_on_random_inputs(self):
        rng = random.Random(99)
        for _ in range(25):
            owner = generate_dataset(rng, rng.randint(0, 60), ["inc", "age"],
                                     id_universe=80)
            project = generate_dataset(rng, rng.randint(0, 60), ["survey"],
                                       id_universe=80)
            salt = bytes([rng.randint(0, 255)])
            out = link_datasets(owner, project, PROJECT_KEY, salt, TTP)
            assert linked_rows(out) == brute_force_join(
                owner, project, PROJECT_KEY, salt)


class TestDisclosureCheck:
    def test_flags_small_groups(self):
        report = run_disclosure_check("group,count\na,3\nb,12\nc,15\n")
        assert report.rows_checked == 3
        assert report.flagged_rows == [0]
        assert not report.passed

    def test_passes_large_groups(self):
        report = run_disclosure_check("group,n\na,10\nb,11\n")
        assert report.passed

    def test_no_count_column(self):
        report = run_disclosure_check("x,y\n1,2\n")
        assert report.passed
        assert "manual review" in report.note


class TestPlatformFlows:
    @pytest.fixture
    def platform(self):
        p = Platform(nodes=default_topology(6), seed=11)
        p.create_project("alpha", owner="owner", site="site-a")
        p.launch_environment("alpha", EnvKind.WORK)
        p.tick(1)
        return p

    def test_import_lands_in_staging(self, platform):
        path = platform.import_via_vpn("alpha", "site-a", True, "in.csv",
                                       b"link_id,v\nid1,1\n")
        assert path == "/projects/alpha/staging/in.csv"
        res = platform.principal("res-alpha")
        assert platform.fs.access(res, path, FsOp.READ).startswith(b"link_id")

    def test_unauthenticated_import(self, platform):
        with pytest.raises(NotAuthenticated):
            platform.import_via_vpn("alpha", "site-a", False, "x", b"d")
        auth = [r for r in platform.mgmt_chain.records
                if r.category is Category.AUTH]
        assert any("rejected" in r.detail for r in auth)

    def test_import_without_vpn_edge(self, platform):
        with pytest.raises(NoVpnEdge):
            platform.import_via_vpn("alpha", "rogue-site", True, "x", b"d")

    def test_ttp_link_end_to_end(self, platform):
        rng = random.Random(3)
        owner_text = generate_dataset(rng, 30, ["income"], id_universe=50)
        project_text = generate_dataset(rng, 25, ["survey"], id_universe=50)
        platform.stage_dataset("owner", "owner", "o.csv", owner_text)
        platform.stage_dataset("project", "alpha", "p.csv", project_text)
        out = platform.ttp_link("alpha", "owner", "o.csv", "p.csv",
                                "linked.csv", salt=b"fixed")
        res = platform.principal("res-alpha")
        text = platform.fs.access(res, out, FsOp.READ).decode()
        key = platform.keys[platform.projects["alpha"]["key"]]
        assert linked_rows(text) == brute_force_join(
            owner_text, project_text, key, b"fixed")
        # linkage consumes the staged inputs: raw ids are nowhere a project
        # principal can still read
        raw_ids = {r.link_id for r in parse_dataset(owner_text)[1]}
        raw_ids |= {r.link_id for r in parse_dataset(project_text)[1]}
        readable = [n for n in platform.fs.subtree("/projects/alpha")
                    if not n.is_dir]
        for node in readable:
            content = node.content.decode("utf-8", "replace")
            for raw in raw_ids:
                assert raw not in content, node.path

    def test_researcher_cannot_link(self, platform):
        platform.stage_dataset("owner", "owner", "o.csv", "link_id,a\nid1,1\n")
        platform.stage_dataset("project", "alpha", "p.csv", "link_id,b\nid1,2\n")
        with pytest.raises(NotTtp):
            platform.ttp_link("alpha", "owner", "o.csv", "p.csv", "out.csv",
                              caller_id="res-alpha")


class TestExportPipeline:
    @pytest.fixture
    def platform(self):
        p = Platform(seed=13)
        p.create_project("alpha", owner="owner")
        res = p.principal("res-alpha")
        p.fs.access(res, "/projects/alpha/data/agg.csv", FsOp.WRITE,
                    b"group,count\na,3\nb,12\n")
        return p

    def test_request_runs_auto_check(self, platform):
        req = platform.request_export("alpha", "/projects/alpha/data/agg.csv")
        assert req.state is RequestState.SUBMITTED
        assert req.auto_check.flagged_rows == [0]

    def test_reviewer_may_approve_despite_flags(self, platform):
        req = platform.request_export("alpha", "/projects/alpha/data/agg.csv")
        platform.review_export(req.id, "dm-owner", approve=True)
        assert req.state is RequestState.APPROVED
        assert req.reviewer == "dm-owner"

    def test_release_of_rejected_request(self, platform):
        req = platform.request_export("alpha", "/projects/alpha/data/agg.csv")
        platform.review_export(req.id, "dm-owner", approve=False)
        with pytest.raises(WrongState):
            platform.release_export(req.id)

    def test_release_copies_bytes_exactly(self, platform):
        req = platform.request_export("alpha", "/projects/alpha/data/agg.csv")
        platform.review_export(req.id, "dm-owner", approve=True)
        record = platform.release_export(req.id)
        outbox_node = platform.fs.node(record.outbox_path)
        project_node = platform.fs.node("/projects/alpha/data/agg.csv")
        assert outbox_node.content == project_node.content
        assert len(platform.outbox) == 1

    def test_non_dm_cannot_review(self, platform):
        req = platform.request_export("alpha", "/projects/alpha/data/agg.csv")
        with pytest.raises(NotReviewer):
            platform.review_export(req.id, "res-alpha", approve=True)

    def test_request_for_missing_artifact(self, platform):
        with pytest.raises(NotFound):
            platform.request_export("alpha", "/projects/alpha/data/ghost.csv")
        with pytest.raises(NotFound):
            platform.request_export("alpha", "/outbox/evil")

    def test_export_audit_trail_ordered(self, platform):
        req = platform.request_export("alpha", "/projects/alpha/data/agg.csv")
        platform.review_export(req.id, "dm-owner", approve=True)
        platform.release_export(req.id)
        exports = [r.detail for r in platform.mgmt_chain.records
                   if r.category is Category.EXPORT and req.id in r.detail]
        assert "submitted" in exports[0]
        assert "approved" in exports[1]
        assert "released" in exports[2]

    def test_double_review(self, platform):
        req = platform.request_export("alpha", "/projects/alpha/data/agg.csv")
        platform.review_export(req.id, "dm-owner", approve=True)
        with pytest.raises(WrongState):
            platform.review_export(req.id, "dm-owner", approve=False)
