import threading

import pytest

from gridauthz.callout import Callouts
from gridauthz.jobmanager import JobManager, JobManagerConfig
from gridauthz.service import (
    ConfigError,
    CorruptLog,
    ServiceConfig,
    read_audit_log,
    read_event_log,
    replay_events,
    send_request,
)

from conftest import BO_DN, FIXTURES, KATE_DN, STRANGER_DN, make_service, write_service_tree

PERMISSIVE = "/O=Grid:\n&(action != NULL)\n"
REFERENCE = (FIXTURES / "reference.policy").read_text()
REF_EXTENDED = (FIXTURES / "reference_extended.policy").read_text()

BO_START = (
    f'SUBMIT dn="{BO_DN}" '
    'rsl="&(executable=test2)(directory=/sandbox/test)(jobtag=NFC)(count=1)"'
)


@pytest.fixture
def svc(tmp_path):
    service = make_service(tmp_path, PERMISSIVE, PERMISSIVE)
    yield service
    service.close()


@pytest.fixture
def ref_svc(tmp_path):
    service = make_service(tmp_path, REFERENCE, REFERENCE)
    yield service
    service.close()


class TestServiceConfig:
    def test_from_file(self, tmp_path):
        config = ServiceConfig.from_file(
            write_service_tree(tmp_path, PERMISSIVE, PERMISSIVE, slots=3))
        assert config.slots == 3
        assert config.self_management is True
        assert config.local_policy_path == tmp_path / "local.policy"

    def test_missing_key(self, tmp_path):
        p = tmp_path / "bad.conf"
        p.write_text("slots = 1\n")
        with pytest.raises(ConfigError):
            ServiceConfig.from_file(p)

    def test_bad_self_management(self, tmp_path):
        config = write_service_tree(tmp_path, PERMISSIVE, PERMISSIVE)
        config.write_text(config.read_text().replace(
            "self_management = on", "self_management = maybe"))
        with pytest.raises(ConfigError):
            ServiceConfig.from_file(config)

    def test_invalid_slots(self, tmp_path):
        with pytest.raises(ConfigError):
            ServiceConfig.from_file(
                write_service_tree(tmp_path, PERMISSIVE, PERMISSIVE, slots=0))


class TestProtocol:
    def test_submit_ok(self, svc):
        assert svc.handle_request(BO_START) == "OK job-1 PENDING"

    def test_unknown_verb(self, svc):
        assert svc.handle_request("FROB x=1").startswith("E-SYNTAX")

    def test_empty_line(self, svc):
        assert svc.handle_request("").startswith("E-SYNTAX")

    def test_malformed_fields(self, svc):
        assert svc.handle_request("SUBMIT nonsense").startswith("E-SYNTAX")

    def test_bad_rsl_is_syntax_error(self, svc):
        resp = svc.handle_request(f'SUBMIT dn="{BO_DN}" rsl="&(broken"')
        assert resp.startswith("E-SYNTAX")

    def test_unlisted_dn_is_gate_error(self, svc):
        resp = svc.handle_request(
            f'SUBMIT dn="{STRANGER_DN}" rsl="&(executable=test1)"')
        assert resp.startswith("E-GATE")

    def test_policy_deny(self, ref_svc):
        resp = ref_svc.handle_request(
            f'SUBMIT dn="{BO_DN}" '
            'rsl="&(executable=test2)(directory=/sandbox/test)(jobtag=NFC)(count=4)"')
        assert resp.startswith("E-DENY")
        assert "LOCAL:" in resp

    def test_unregistered_provider_is_error(self, tmp_path):
        service = make_service(tmp_path, PERMISSIVE, PERMISSIVE,
                               callout="gram-authz akenti\n")
        try:
            assert service.handle_request(BO_START).startswith("E-ERROR")
        finally:
            service.close()

    def test_unknown_job(self, svc):
        resp = svc.handle_request(f'STATUS dn="{BO_DN}" job="job-9"')
        assert resp.startswith("E-UNKNOWN-JOB")

    def test_double_cancel_is_transition_error(self, svc):
        svc.handle_request(BO_START)
        assert svc.handle_request(
            f'CANCEL dn="{BO_DN}" job="job-1"') == "OK job-1 CANCELED"
        assert svc.handle_request(
            f'CANCEL dn="{BO_DN}" job="job-1"').startswith("E-TRANSITION")

    def test_tick_reports_changes(self, svc):
        svc.handle_request(BO_START)
        assert svc.handle_request('TICK now="1"') == "OK time=1 job-1:ACTIVE"
        assert svc.handle_request('TICK now="2"') == "OK time=2"

    def test_clock_regression_is_transition_error(self, svc):
        svc.handle_request('TICK now="5"')
        assert svc.handle_request('TICK now="4"').startswith("E-TRANSITION")

    def test_signal_priority(self, svc):
        svc.handle_request(BO_START)
        resp = svc.handle_request(
            f'SIGNAL dn="{BO_DN}" job="job-1" kind="priority" value="7"')
        assert resp == "OK job-1 PRIORITY 7"

    def test_signal_priority_requires_integer(self, svc):
        svc.handle_request(BO_START)
        resp = svc.handle_request(
            f'SIGNAL dn="{BO_DN}" job="job-1" kind="priority" value="high"')
        assert resp.startswith("E-SYNTAX")

    def test_status(self, svc):
        svc.handle_request(BO_START)
        resp = svc.handle_request(f'STATUS dn="{BO_DN}" job="job-1"')
        assert resp.startswith("OK job-1 PENDING")
        assert "jobtag=NFC" in resp

    def test_list_with_filters(self, svc):
        svc.handle_request(BO_START)
        svc.handle_request(
            f'SUBMIT dn="{KATE_DN}" '
            'rsl="&(executable=TRANSP)(directory=/sandbox/test)(jobtag=NFC)"')
        assert svc.handle_request("LIST") == "OK job-1:PENDING job-2:PENDING"
        assert svc.handle_request(
            f'LIST owner="{KATE_DN}"') == "OK job-2:PENDING"
        assert svc.handle_request('LIST state="DONE"') == "OK"

    def test_policy_eval_start(self, ref_svc):
        resp = ref_svc.handle_request(
            f'POLICY-EVAL dn="{BO_DN}" action="start" '
            'rsl="&(executable=test1)(directory=/sandbox/test)(jobtag=ADS)(count=5)"')
        assert resp.startswith("OK DENY")
        assert "(count < 4)" in resp

    def test_policy_eval_management(self, ref_svc):
        ref_svc.handle_request(BO_START)
        resp = ref_svc.handle_request(
            f'POLICY-EVAL dn="{KATE_DN}" action="cancel" job="job-1"')
        assert resp.startswith("OK PERMIT")


class TestReload:
    def test_policy_swap_changes_decisions(self, tmp_path):
        service = make_service(tmp_path, REFERENCE, REFERENCE)
        try:
            service.handle_request(BO_START)
            service.handle_request('TICK now="1"')
            suspend = f'SIGNAL dn="{KATE_DN}" job="job-1" kind="suspend"'
            assert service.handle_request(suspend).startswith("E-DENY")
            (tmp_path / "local.policy").write_text(REF_EXTENDED)
            (tmp_path / "vo.policy").write_text(REF_EXTENDED)
            assert service.handle_request("RELOAD") == "OK reloaded"
            assert service.handle_request(suspend) == "OK job-1 SUSPENDED"
        finally:
            service.close()

    def test_gridmap_swap(self, tmp_path):
        open_to_all = PERMISSIVE + "\n/O=Other:\n&(action != NULL)\n"
        service = make_service(tmp_path, open_to_all, open_to_all)
        try:
            submit = f'SUBMIT dn="{STRANGER_DN}" rsl="&(executable=x)"'
            assert service.handle_request(submit).startswith("E-GATE")
            gm = (tmp_path / "gridmap").read_text()
            (tmp_path / "gridmap").write_text(gm + f'"{STRANGER_DN}" guest\n')
            service.handle_request("RELOAD")
            assert service.handle_request(submit) == "OK job-1 PENDING"
        finally:
            service.close()

    def test_reload_with_broken_policy_keeps_old_set(self, tmp_path):
        service = make_service(tmp_path, REFERENCE, REFERENCE)
        try:
            (tmp_path / "local.policy").write_text("not a policy ===\n")
            assert service.handle_request("RELOAD").startswith("E-ERROR")
            # old documents still in force
            assert service.handle_request(BO_START) == "OK job-1 PENDING"
        finally:
            service.close()


class TestAuditLog:
    def test_sources_and_gapless_sequence(self, tmp_path):
        service = make_service(tmp_path, REFERENCE, REFERENCE)
        try:
            service.handle_request(BO_START)
            service.handle_request(f'CANCEL dn="{KATE_DN}" job="job-1"')
        finally:
            service.close()
        records = read_audit_log(tmp_path / "audit.log")
        assert [int(r["seq"]) for r in records] == list(range(1, len(records) + 1))
        assert [r["source"] for r in records] == ["GATE", "LOCAL-PEP", "LOCAL-PEP"]
        assert all(r["decision"] == "PERMIT" for r in records)

    def test_self_rule_source(self, tmp_path):
        service = make_service(tmp_path, REFERENCE, REFERENCE)
        try:
            service.handle_request(BO_START)
            service.handle_request(f'CANCEL dn="{BO_DN}" job="job-1"')
        finally:
            service.close()
        records = read_audit_log(tmp_path / "audit.log")
        assert records[-1]["source"] == "SELF-RULE"

    def test_deny_attributed_to_deciding_pep(self, tmp_path):
        service = make_service(tmp_path, PERMISSIVE, REFERENCE)
        try:
            resp = service.handle_request(
                f'SUBMIT dn="{BO_DN}" '
                'rsl="&(executable=test3)(directory=/sandbox/test)(jobtag=NFC)"')
            assert resp.startswith("E-DENY")
        finally:
            service.close()
        records = read_audit_log(tmp_path / "audit.log")
        assert records[-1]["source"] == "VO-PEP"
        assert records[-1]["decision"] == "DENY"

    def test_sequence_continues_across_restart(self, tmp_path):
        config = write_service_tree(tmp_path, REFERENCE, REFERENCE)
        first = make_service(tmp_path, REFERENCE, REFERENCE)
        first.handle_request(BO_START)
        first.close()
        before = len(read_audit_log(tmp_path / "audit.log"))
        from gridauthz.service import Service
        second = Service(ServiceConfig.from_file(config))
        second.handle_request(
            f'SUBMIT dn="{KATE_DN}" '
            'rsl="&(executable=TRANSP)(directory=/sandbox/test)(jobtag=NFC)"')
        second.close()
        records = read_audit_log(tmp_path / "audit.log")
        assert [int(r["seq"]) for r in records] == list(range(1, len(records) + 1))
        assert len(records) > before


class TestLogIntegrity:
    def test_gap_detected(self, tmp_path):
        log = tmp_path / "audit.log"
        log.write_text(
            'seq=1 time=0 requester="x" action=start job=- decision=PERMIT '
            'reason="" ref="-" source=GATE\n'
            'seq=3 time=0 requester="x" action=start job=- decision=PERMIT '
            'reason="" ref="-" source=GATE\n')
        with pytest.raises(CorruptLog) as e:
            read_audit_log(log)
        assert e.value.sequence == 2

    def test_unreadable_event_detected(self, tmp_path):
        log = tmp_path / "events.log"
        log.write_text("seq=1 time=banana job=job-1 event=created\n")
        with pytest.raises(CorruptLog):
            read_event_log(log)

    def test_empty_logs_are_fine(self, tmp_path):
        (tmp_path / "a.log").write_text("")
        assert read_audit_log(tmp_path / "a.log") == []
        assert read_event_log(tmp_path / "a.log") == []


def drive_scenario(service):
    service.handle_request(BO_START)
    service.handle_request(
        f'SUBMIT dn="{KATE_DN}" '
        'rsl="&(executable=TRANSP)(directory=/sandbox/test)(jobtag=NFC)(maxtime=3)"')
    service.handle_request('TICK now="1"')
    service.handle_request(f'SIGNAL dn="{BO_DN}" job="job-1" kind="suspend"')
    service.handle_request(f'SIGNAL dn="{BO_DN}" job="job-1" kind="priority" value="2"')
    service.handle_request('TICK now="2"')
    service.handle_request(f'SIGNAL dn="{BO_DN}" job="job-1" kind="resume"')
    service.handle_request('TICK now="6"')
    service.handle_request(f'CANCEL dn="{KATE_DN}" job="job-1"')
    service.handle_request('TICK now="9"')


class TestReplay:
    def test_replay_reconstructs_job_table(self, tmp_path):
        service = make_service(tmp_path, PERMISSIVE, PERMISSIVE)
        try:
            drive_scenario(service)
            original = service.jobmanager.snapshot()
            callouts = service.callouts
        finally:
            service.close()
        events = read_event_log(tmp_path / "events.log")
        fresh = JobManager(callouts, JobManagerConfig(slots=2))
        replay_events(events, fresh)
        assert fresh.snapshot() == original
        # the replayed clock is the latest recorded event time
        assert fresh.clock == 6
        assert fresh._next_id == 3

    def test_startup_replay_resumes_identically(self, tmp_path):
        config = write_service_tree(tmp_path, PERMISSIVE, PERMISSIVE)
        from gridauthz.service import Service
        first = Service(ServiceConfig.from_file(config))
        drive_scenario(first)
        snapshot = first.jobmanager.snapshot()
        first.close()
        second = Service(ServiceConfig.from_file(config))
        try:
            assert second.jobmanager.snapshot() == snapshot
            # the restored table keeps working: job-2 finishes on schedule
            second.handle_request('TICK now="10"')
            resp = second.handle_request(f'STATUS dn="{KATE_DN}" job="job-2"')
            assert "DONE" in resp
        finally:
            second.close()


def test_tcp_round_trip(tmp_path):
    service = make_service(tmp_path, PERMISSIVE, PERMISSIVE)
    thread = threading.Thread(target=service.serve_forever, daemon=True)
    thread.start()
    for _ in range(200):
        if getattr(service, "_server", None) is not None:
            break
        threading.Event().wait(0.01)
    try:
        host, port = service._server.server_address[:2]
        endpoint = f"{host}:{port}"
        assert send_request(endpoint, BO_START) == "OK job-1 PENDING"
        assert send_request(endpoint, 'TICK now="1"') == "OK time=1 job-1:ACTIVE"
        assert send_request(endpoint, "NOPE").startswith("E-SYNTAX")
    finally:
        service.shutdown()
        thread.join(timeout=5)
        service.close()
