"""Service tying the pipeline together: line protocol, audit log, replay.

Protocol: one UTF-8 request line, one response line.

    SUBMIT dn="/O=Grid/.../CN=Bo Liu" rsl="&(executable=test1)..."
    CANCEL dn="..." job="job-1"
    SIGNAL dn="..." job="job-1" kind="suspend"
    SIGNAL dn="..." job="job-1" kind="priority" value="5"
    STATUS dn="..." job="job-1"
    LIST [jobtag="..."] [owner="..."] [state="..."]
    POLICY-EVAL dn="..." action="start" rsl="..."   (or job="job-1")
    TICK now="3"
    RELOAD

Responses are ``OK ...`` or ``E-<CLASS> <reason>`` where the class is
one of SYNTAX, GATE, DENY, ERROR, UNKNOWN-JOB, TRANSITION.
"""

from __future__ import annotations

import shlex
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import gatekeeper
from .callout import (
    CalloutConfig,
    CalloutConfigError,
    Callouts,
    GRAM_AUTHZ,
    make_builtin_registry,
    parse_callout_config,
)
from .engine import (
    AuthorizationRequest,
    Decision,
    JobContext,
    MANAGEMENT_ACTIONS,
    Outcome,
    authorize,
)
from .gatekeeper import (
    Gridmap,
    GridmapSyntaxError,
    NotAuthorized,
    PolicyDenied,
    PolicyFailure,
    parse_gridmap,
)
from .jobmanager import (
    ClockRegression,
    DuplicateTicket,
    HistoryEvent,
    InvalidTransition,
    JobManager,
    JobManagerConfig,
    JobRecord,
    JobState,
    UnknownJob,
)
from .policy import (
    GridIdentity,
    IdentitySyntaxError,
    PolicyDocument,
    PolicySyntaxError,
    parse_policy,
)
from .rsl import JobDescription, RslError, apply_defaults, parse_rsl, to_job_description


class ConfigError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


class CorruptLog(ValueError):
    def __init__(self, sequence: int, detail: str):
        self.sequence = sequence
        super().__init__(f"corrupt log at sequence {sequence}: {detail}")


@dataclass
class ServiceConfig:
    local_policy_path: Path
    vo_policy_path: Path
    gridmap_path: Path
    callout_config_path: Path
    audit_log_path: Path
    event_log_path: Path
    slots: int = 1
    self_management: bool = True
    listen_endpoint: str = "127.0.0.1:7736"

    def __post_init__(self):
        if self.slots < 1:
            raise ConfigError("slots must be >= 1")

    @classmethod
    def from_file(cls, path) -> "ServiceConfig":
        path = Path(path)
        base = path.parent
        values: dict[str, str] = {}
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()

        def file_path(key):
            if key not in values:
                raise ConfigError(f"{path}: missing required key {key!r}")
            p = Path(values[key])
            return p if p.is_absolute() else base / p

        self_management = values.get("self_management", "on").lower()
        if self_management not in ("on", "off"):
            raise ConfigError(f"{path}: self_management must be 'on' or 'off'")
        return cls(
            local_policy_path=file_path("local_policy_path"),
            vo_policy_path=file_path("vo_policy_path"),
            gridmap_path=file_path("gridmap_path"),
            callout_config_path=file_path("callout_config_path"),
            audit_log_path=file_path("audit_log_path"),
            event_log_path=file_path("event_log_path"),
            slots=int(values.get("slots", "1")),
            self_management=self_management == "on",
            listen_endpoint=values.get("listen_endpoint", "127.0.0.1:7736"),
        )


def _q(text: str) -> str:
    escaped = str(text).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def _parse_kv_line(line: str) -> dict[str, str]:
    fields = {}
    for token in shlex.split(line):
        if "=" not in token:
            raise ValueError(f"malformed field {token!r}")
        key, _, value = token.partition("=")
        fields[key] = value
    return fields


@dataclass
class AuditRecord:
    sequence: int
    timestamp: int
    requester: str
    action: str
    job_id: str | None
    outcome: str
    reason: str
    ref: str | None
    source: str

    def render(self) -> str:
        return (
            f"seq={self.sequence} time={self.timestamp} requester={_q(self.requester)} "
            f"action={self.action} job={self.job_id or '-'} decision={self.outcome} "
            f"reason={_q(self.reason)} ref={_q(self.ref or '-')} source={self.source}"
        )


class AuditLog:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.sequence = _last_sequence(self.path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def record(self, timestamp, requester, action, job_id, decision: Decision,
               ref, source) -> AuditRecord:
        self.sequence += 1
        rec = AuditRecord(
            sequence=self.sequence,
            timestamp=timestamp,
            requester=requester,
            action=action,
            job_id=job_id,
            outcome=decision.outcome.value,
            reason=decision.reason,
            ref=ref,
            source=source,
        )
        self._fh.write(rec.render() + "\n")
        self._fh.flush()
        return rec

    def close(self):
        self._fh.close()


def read_audit_log(path) -> list[dict]:
    records = []
    expected = 1
    for raw in Path(path).read_text().splitlines():
        if not raw.strip():
            continue
        try:
            fields = _parse_kv_line(raw)
            seq = int(fields["seq"])
        except (ValueError, KeyError) as e:
            raise CorruptLog(expected, f"unreadable record: {e}") from e
        if seq != expected:
            raise CorruptLog(expected, f"sequence jumped to {seq}")
        records.append(fields)
        expected += 1
    return records


class EventLog:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.sequence = _last_sequence(self.path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def record(self, job_id, event, actor, time, payload: dict):
        self.sequence += 1
        parts = [
            f"seq={self.sequence}",
            f"time={time}",
            f"job={job_id}",
            f"event={event}",
            f"actor={_q(actor)}",
        ]
        for key, value in payload.items():
            parts.append(f"{key}={_q('-' if value is None else value)}")
        self._fh.write(" ".join(parts) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _last_sequence(path: Path) -> int:
    if not path.exists():
        return 0
    last = 0
    for raw in path.read_text().splitlines():
        raw = raw.strip()
        if not raw:
            continue
        try:
            fields = _parse_kv_line(raw)
            last = int(fields["seq"])
        except (ValueError, KeyError):
            continue
    return last


def read_event_log(path) -> list[dict]:
    events = []
    expected = 1
    for raw in Path(path).read_text().splitlines():
        if not raw.strip():
            continue
        try:
            fields = _parse_kv_line(raw)
            seq = int(fields["seq"])
            fields["time"] = int(fields["time"])
        except (ValueError, KeyError) as e:
            raise CorruptLog(expected, f"unreadable event: {e}") from e
        if seq != expected:
            raise CorruptLog(expected, f"sequence jumped to {seq}")
        events.append(fields)
        expected += 1
    return events


def replay_events(events: list[dict], jm: JobManager) -> JobManager:
    """Rebuild the job table of ``jm`` from an event stream."""
    max_id = 0
    clock = 0
    for ev in events:
        job_id = ev["job"]
        kind = ev["event"]
        time = ev["time"]
        actor = ev["actor"]
        clock = max(clock, time)
        if kind == "created":
            record = JobRecord(
                job_id=job_id,
                owner=GridIdentity.parse(ev["owner"]),
                account=ev["account"],
                jobtag=None if ev.get("jobtag", "-") == "-" else ev["jobtag"],
                description=apply_defaults(to_job_description(parse_rsl(ev["rsl"]))),
                priority=int(ev["priority"]),
                duration=int(ev["duration"]),
            )
            jm.jobs[job_id] = record
            max_id = max(max_id, record.seq)
        else:
            record = jm.jobs.get(job_id)
            if record is None:
                raise CorruptLog(ev["seq"], f"event for unknown job {job_id}")
            if kind == "dispatched":
                record.state = JobState.ACTIVE
                record.started_at = time
                record.active_since = time
            elif kind == "suspended":
                if record.active_since is not None:
                    record.active_time += time - record.active_since
                    record.active_since = None
                record.state = JobState.SUSPENDED
            elif kind == "resumed":
                record.state = JobState.ACTIVE
                record.active_since = time
            elif kind == "priority-changed":
                record.priority = int(ev["value"])
            elif kind == "done":
                record.state = JobState.DONE
                record.ended_at = time
                record.active_time = record.duration
                record.active_since = None
            elif kind == "canceled":
                if record.active_since is not None:
                    record.active_time += time - record.active_since
                    record.active_since = None
                record.state = JobState.CANCELED
                record.ended_at = time
            elif kind == "failed":
                record.state = JobState.FAILED
                record.ended_at = time
                record.active_since = None
            else:
                raise CorruptLog(ev["seq"], f"unknown event kind {kind!r}")
        record.history.append(HistoryEvent(time, kind, actor))
    jm._next_id = max_id + 1
    jm.clock = clock
    return jm


class Service:
    """In-process service; the TCP server and CLI funnel into handle_request."""

    def __init__(self, config: ServiceConfig, registry=None):
        self.config = config
        self._lock = threading.RLock()
        self._policies: tuple[PolicyDocument, PolicyDocument] = self._load_policies()
        self.gridmap: Gridmap = self._load_gridmap()
        self.callout_config: CalloutConfig = self._load_callout_config()
        self.callout_config.require(GRAM_AUTHZ)
        if registry is None:
            registry = make_builtin_registry(lambda: self._policies)
        self.callouts = Callouts(self.callout_config, registry)
        self.audit_log = AuditLog(config.audit_log_path)
        self.event_log = EventLog(config.event_log_path)
        self.jobmanager = JobManager(
            self.callouts,
            JobManagerConfig(slots=config.slots, self_management=config.self_management),
            audit=self._audit,
            on_event=self._on_event,
        )
        existing = read_event_log(config.event_log_path)
        if existing:
            replay_events(existing, self.jobmanager)

    # -- loading ---------------------------------------------------------

    def _load_policies(self):
        local = parse_policy(
            _read(self.config.local_policy_path), "LOCAL",
            str(self.config.local_policy_path))
        vo = parse_policy(
            _read(self.config.vo_policy_path), "VO",
            str(self.config.vo_policy_path))
        return (local, vo)

    def _load_gridmap(self):
        return parse_gridmap(_read(self.config.gridmap_path))

    def _load_callout_config(self):
        return parse_callout_config(_read(self.config.callout_config_path))

    @property
    def policies(self):
        return self._policies

    def reload(self):
        """Atomically swap policies and gridmap; in-flight requests see one set."""
        local_vo = self._load_policies()
        gridmap = self._load_gridmap()
        with self._lock:
            self._policies = local_vo
            self.gridmap = gridmap

    # -- audit / event plumbing -------------------------------------------

    def _audit(self, source, requester, action, job_id, decision: Decision, ref):
        if source == "PEP":
            source = "VO-PEP" if decision.reason.startswith("VO: ") else "LOCAL-PEP"
        self.audit_log.record(
            self.jobmanager.clock if hasattr(self, "jobmanager") else 0,
            requester.render(), action, job_id, decision, ref, source)

    def _on_event(self, record: JobRecord, event, actor, time, payload):
        self.event_log.record(record.job_id, event, actor, time, payload)

    # -- protocol ----------------------------------------------------------

    def handle_request(self, line: str) -> str:
        with self._lock:
            try:
                return self._dispatch(line.strip())
            except ProtocolError as e:
                return f"E-SYNTAX {e}"
            except (RslError, IdentitySyntaxError) as e:
                return f"E-SYNTAX {e}"
            except NotAuthorized as e:
                return f"E-GATE {e}"
            except PolicyDenied as e:
                return f"E-DENY {e.reason}"
            except PolicyFailure as e:
                return f"E-ERROR {e.detail}"
            except DuplicateTicket as e:
                return f"E-ERROR {e}"
            except UnknownJob as e:
                return f"E-UNKNOWN-JOB {e}"
            except (InvalidTransition, ClockRegression) as e:
                return f"E-TRANSITION {e}"
            except (PolicySyntaxError, GridmapSyntaxError,
                    CalloutConfigError, ConfigError) as e:
                return f"E-ERROR {e}"

    def _dispatch(self, line: str) -> str:
        if not line:
            raise ProtocolError("empty request")
        verb, _, rest = line.partition(" ")
        try:
            fields = _parse_kv_line(rest)
        except ValueError as e:
            raise ProtocolError(str(e)) from e
        handler = getattr(self, "_cmd_" + verb.lower().replace("-", "_"), None)
        if handler is None:
            raise ProtocolError(f"unknown verb {verb!r}")
        return handler(fields)

    def _need(self, fields, *keys):
        for key in keys:
            if key not in fields:
                raise ProtocolError(f"missing field {key!r}")
        return [fields[k] for k in keys]

    def _cmd_submit(self, fields):
        dn, rsl_text = self._need(fields, "dn", "rsl")
        requester = GridIdentity.parse(dn)
        ticket = gatekeeper.admit(
            self.gridmap, self.callouts, requester, rsl_text, audit=self._audit)
        record = self.jobmanager.submit(ticket)
        return f"OK {record.job_id} {record.state.value}"

    def _cmd_cancel(self, fields):
        dn, job_id = self._need(fields, "dn", "job")
        record = self.jobmanager.cancel(job_id, GridIdentity.parse(dn))
        return f"OK {record.job_id} {record.state.value}"

    def _cmd_signal(self, fields):
        dn, job_id, kind = self._need(fields, "dn", "job", "kind")
        value = None
        if kind == "priority":
            (raw,) = self._need(fields, "value")
            try:
                value = int(raw)
            except ValueError:
                raise ProtocolError(f"priority value must be an integer, got {raw!r}")
        elif kind not in ("suspend", "resume"):
            raise ProtocolError(f"unknown signal kind {kind!r}")
        record = self.jobmanager.signal(job_id, GridIdentity.parse(dn), kind, value)
        if kind == "priority":
            return f"OK {record.job_id} PRIORITY {record.priority}"
        return f"OK {record.job_id} {record.state.value}"

    def _cmd_status(self, fields):
        dn, job_id = self._need(fields, "dn", "job")
        view = self.jobmanager.status(job_id, GridIdentity.parse(dn))
        return (
            f"OK {view['job_id']} {view['state']} owner={_q(view['owner'])} "
            f"jobtag={view['jobtag'] or '-'} priority={view['priority']} "
            f"started={_opt(view['started_at'])} ended={_opt(view['ended_at'])} "
            f"history={view['history_length']}"
        )

    def _cmd_list(self, fields):
        jobtag = fields.get("jobtag")
        owner = GridIdentity.parse(fields["owner"]) if "owner" in fields else None
        state = None
        if "state" in fields:
            try:
                state = JobState(fields["state"])
            except ValueError:
                raise ProtocolError(f"unknown state {fields['state']!r}")
        views = self.jobmanager.list_jobs(jobtag=jobtag, owner=owner, state=state)
        body = " ".join(f"{v['job_id']}:{v['state']}" for v in views)
        return f"OK {body}".rstrip()

    def _cmd_policy_eval(self, fields):
        dn, action = self._need(fields, "dn", "action")
        requester = GridIdentity.parse(dn)
        if action == "start":
            (rsl_text,) = self._need(fields, "rsl")
            description = apply_defaults(to_job_description(parse_rsl(rsl_text)))
            req = AuthorizationRequest(requester, "start", description)
        elif action in MANAGEMENT_ACTIONS:
            (job_id,) = self._need(fields, "job")
            record = self.jobmanager.jobs.get(job_id)
            if record is None:
                raise UnknownJob(job_id)
            req = AuthorizationRequest(
                requester, action, record.description,
                JobContext(job_id, record.owner, record.jobtag,
                           fields.get("signal")))
        else:
            raise ProtocolError(f"unknown action {action!r}")
        local_doc, vo_doc = self._policies
        decision, (local_expl, vo_expl) = authorize(local_doc, vo_doc, req)
        return (
            f"OK {decision.outcome.value} reason={_q(decision.reason)} "
            f"local={_q(_explain_summary(local_expl))} "
            f"vo={_q(_explain_summary(vo_expl))}"
        )

    def _cmd_tick(self, fields):
        (raw,) = self._need(fields, "now")
        try:
            now = int(raw)
        except ValueError:
            raise ProtocolError(f"tick time must be an integer, got {raw!r}")
        changes = self.jobmanager.tick(now)
        body = " ".join(f"{job_id}:{state}" for job_id, state in changes)
        return f"OK time={now} {body}".rstrip()

    def _cmd_reload(self, fields):
        self.reload()
        return "OK reloaded"

    def close(self):
        self.audit_log.close()
        self.event_log.close()

    # -- TCP server ---------------------------------------------------------

    def serve_forever(self):
        host, port = self.config.listen_endpoint.rsplit(":", 1)
        service = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    raw = self.rfile.readline()
                    if not raw:
                        break
                    response = service.handle_request(raw.decode("utf-8"))
                    self.wfile.write((response + "\n").encode("utf-8"))

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        with Server((host, int(port)), Handler) as server:
            self._server = server
            server.serve_forever()

    def shutdown(self):
        server = getattr(self, "_server", None)
        if server is not None:
            server.shutdown()


def _explain_summary(expl) -> str:
    if expl.satisfying_grant:
        return f"grant {expl.satisfying_grant}"
    for check in expl.matched_requirements:
        if check.applies and not check.held:
            failing = check.failing.render() if check.failing else "?"
            return f"requirement {check.ref} failed at {failing}"
    for check in expl.matched_grants:
        if not check.satisfied and check.failing is not None:
            return f"grant {check.ref} failed at {check.failing.render()}"
    return "no applicable statements"


def _opt(value) -> str:
    return "-" if value is None else str(value)


def _read(path: Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from e


def send_request(endpoint: str, line: str, timeout: float = 10.0) -> str:
    """One-shot protocol client used by the CLI subcommands."""
    import socket

    host, port = endpoint.rsplit(":", 1)
    with socket.create_connection((host, int(port)), timeout=timeout) as sock:
        sock.sendall((line + "\n").encode("utf-8"))
        data = b""
        while not data.endswith(b"\n"):
            chunk = sock.recv(4096)
            if not chunk:
                break
            data += chunk
    return data.decode("utf-8").strip()
