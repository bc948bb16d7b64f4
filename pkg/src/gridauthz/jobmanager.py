"""Job manager: policy-mediated lifecycle control over simulated jobs.

Virtual time advances only through explicit tick() calls, which makes
every lifecycle test deterministic.  Dispatch order is priority
descending, then submission order; completed active time is accounted
from the dispatch/resume timestamps so completion instants are exact.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum

from .callout import CalloutArgs, CalloutOutcome, Callouts, GRAM_AUTHZ, decision_of
from .engine import Decision, JobContext, MANAGEMENT_ACTIONS, Outcome, permit
from .gatekeeper import AdmissionTicket, PolicyDenied, PolicyFailure
from .policy import GridIdentity
from .rsl import JobDescription, description_to_rsl, int_value, value_text

DEFAULT_DURATION = 10


class JobState(str, Enum):
    PENDING = "PENDING"
    ACTIVE = "ACTIVE"
    SUSPENDED = "SUSPENDED"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"


LEGAL_TRANSITIONS = {
    JobState.PENDING: {JobState.ACTIVE, JobState.CANCELED, JobState.FAILED},
    JobState.ACTIVE: {JobState.SUSPENDED, JobState.DONE, JobState.FAILED, JobState.CANCELED},
    JobState.SUSPENDED: {JobState.ACTIVE, JobState.CANCELED, JobState.FAILED},
    JobState.DONE: set(),
    JobState.FAILED: set(),
    JobState.CANCELED: set(),
}

TERMINAL_STATES = {JobState.DONE, JobState.FAILED, JobState.CANCELED}

SIGNAL_KINDS = ("suspend", "resume", "priority")


class JobManagerError(Exception):
    pass


class UnknownJob(JobManagerError):
    def __init__(self, job_id: str):
        self.job_id = job_id
        super().__init__(f"unknown job {job_id!r}")


class InvalidTransition(JobManagerError):
    def __init__(self, job_id: str, state: JobState, detail: str):
        self.job_id = job_id
        self.state = state
        super().__init__(f"{job_id}: {detail} (state {state.value})")


class DuplicateTicket(JobManagerError):
    def __init__(self, ticket_id: str):
        super().__init__(f"admission ticket {ticket_id} already submitted")


class ClockRegression(JobManagerError):
    def __init__(self, now: int, clock: int):
        super().__init__(f"tick time {now} earlier than current time {clock}")


@dataclass
class HistoryEvent:
    time: int
    event: str
    actor: str


@dataclass
class JobRecord:
    job_id: str
    owner: GridIdentity
    account: str
    jobtag: str | None
    description: JobDescription
    state: JobState = JobState.PENDING
    priority: int = 0
    duration: int = DEFAULT_DURATION
    started_at: int | None = None
    ended_at: int | None = None
    history: list[HistoryEvent] = field(default_factory=list)
    # scheduler accounting
    active_time: int = 0
    active_since: int | None = None

    @property
    def seq(self) -> int:
        return int(self.job_id.rsplit("-", 1)[1])

    def status_view(self) -> dict:
        return {
            "job_id": self.job_id,
            "state": self.state.value,
            "owner": self.owner.render(),
            "account": self.account,
            "jobtag": self.jobtag,
            "priority": self.priority,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "history_length": len(self.history),
        }


@dataclass
class JobManagerConfig:
    slots: int = 1
    self_management: bool = True

    def __post_init__(self):
        if self.slots < 1:
            raise ValueError("slots must be >= 1")


class JobManager:
    """Single-writer job table with a simulated local scheduler."""

    def __init__(self, callouts: Callouts, config: JobManagerConfig,
                 audit=None, on_event=None):
        self.callouts = callouts
        self.config = config
        self.audit = audit
        self.on_event = on_event
        self.clock = 0
        self.jobs: dict[str, JobRecord] = {}
        self._next_id = 1
        self._submitted_tickets: set[str] = set()
        self._lock = threading.RLock()

    # -- helpers ---------------------------------------------------------

    def _emit(self, record: JobRecord, event: str, actor: str, time: int, **payload):
        record.history.append(HistoryEvent(time, event, actor))
        if self.on_event:
            self.on_event(record, event, actor, time, payload)

    def _transition(self, record: JobRecord, new_state: JobState,
                    event: str, actor: str, time: int, **payload):
        if new_state not in LEGAL_TRANSITIONS[record.state]:
            raise InvalidTransition(
                record.job_id, record.state,
                f"cannot move to {new_state.value}")
        record.state = new_state
        self._emit(record, event, actor, time, **payload)

    def _get(self, job_id: str) -> JobRecord:
        record = self.jobs.get(job_id)
        if record is None:
            raise UnknownJob(job_id)
        return record

    def _active_count(self) -> int:
        return sum(1 for r in self.jobs.values() if r.state is JobState.ACTIVE)

    # -- submission ------------------------------------------------------

    def submit(self, ticket: AdmissionTicket) -> JobRecord:
        with self._lock:
            if not ticket.decision.is_permit:
                raise PolicyDenied(ticket.decision.reason or "admission not permitted")
            if ticket.ticket_id in self._submitted_tickets:
                raise DuplicateTicket(ticket.ticket_id)
            self._submitted_tickets.add(ticket.ticket_id)
            job_id = f"job-{self._next_id}"
            self._next_id += 1
            jobtag_values = ticket.description.get("jobtag")
            jobtag = value_text(jobtag_values[0]) if jobtag_values else None
            duration = DEFAULT_DURATION
            maxtime_values = ticket.description.get("maxtime")
            if maxtime_values:
                n = int_value(maxtime_values[0])
                if n is not None and n > 0:
                    duration = n
            record = JobRecord(
                job_id=job_id,
                owner=ticket.requester,
                account=ticket.account,
                jobtag=jobtag,
                description=ticket.description,
                duration=duration,
            )
            self.jobs[job_id] = record
            self._emit(
                record, "created", ticket.requester.render(), self.clock,
                owner=ticket.requester.render(),
                account=ticket.account,
                jobtag=jobtag,
                priority=record.priority,
                duration=duration,
                rsl=description_to_rsl(ticket.description),
            )
            return record

    # -- management authorization ----------------------------------------

    def authorize_management(self, record: JobRecord, requester: GridIdentity,
                             action: str, signal_kind: str | None = None) -> Decision:
        if action not in MANAGEMENT_ACTIONS:
            raise ValueError(f"not a management action: {action!r}")
        if self.config.self_management and requester == record.owner:
            decision = permit()
            if self.audit:
                self.audit("SELF-RULE", requester, action, record.job_id, decision, None)
            return decision
        args = CalloutArgs(
            requester=requester,
            action=action,
            rsl_text=description_to_rsl(record.description),
            initiator=record.owner,
            job_id=record.job_id,
            job_context=JobContext(
                job_id=record.job_id,
                jobowner=record.owner,
                jobtag=record.jobtag,
                signal_kind=signal_kind,
            ),
        )
        result = self.callouts.invoke(GRAM_AUTHZ, args)
        decision = decision_of(result)
        if self.audit:
            self.audit("PEP", requester, action, record.job_id, decision,
                       _satisfying_ref(result))
        return decision

    def _require_permit(self, decision: Decision):
        if decision.outcome is Outcome.DENY:
            raise PolicyDenied(decision.reason)
        if decision.outcome is Outcome.ERROR:
            raise PolicyFailure(decision.reason)

    # -- management operations -------------------------------------------

    def cancel(self, job_id: str, requester: GridIdentity) -> JobRecord:
        with self._lock:
            record = self._get(job_id)
            self._require_permit(
                self.authorize_management(record, requester, "cancel"))
            if record.state is JobState.ACTIVE and record.active_since is not None:
                record.active_time += self.clock - record.active_since
                record.active_since = None
            self._transition(record, JobState.CANCELED, "canceled",
                             requester.render(), self.clock)
            record.ended_at = self.clock
            return record

    def signal(self, job_id: str, requester: GridIdentity, kind: str,
               value: int | None = None) -> JobRecord:
        if kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {kind!r}")
        if kind == "priority" and value is None:
            raise ValueError("priority signal needs an integer argument")
        with self._lock:
            record = self._get(job_id)
            self._require_permit(
                self.authorize_management(record, requester, "signal", kind))
            actor = requester.render()
            if kind == "suspend":
                if record.active_since is not None:
                    record.active_time += self.clock - record.active_since
                    record.active_since = None
                self._transition(record, JobState.SUSPENDED, "suspended",
                                 actor, self.clock)
            elif kind == "resume":
                if record.state is not JobState.SUSPENDED:
                    raise InvalidTransition(job_id, record.state,
                                            "only a suspended job can be resumed")
                if self._active_count() >= self.config.slots:
                    raise InvalidTransition(job_id, record.state, "no free slot for resume")
                self._transition(record, JobState.ACTIVE, "resumed", actor, self.clock)
                record.active_since = self.clock
            else:
                if record.state in TERMINAL_STATES:
                    raise InvalidTransition(job_id, record.state,
                                            "cannot change priority of a finished job")
                record.priority = value
                self._emit(record, "priority-changed", actor, self.clock, value=value)
            return record

    def status(self, job_id: str, requester: GridIdentity) -> dict:
        with self._lock:
            record = self._get(job_id)
            self._require_permit(
                self.authorize_management(record, requester, "information"))
            return record.status_view()

    def list_jobs(self, jobtag: str | None = None, owner: GridIdentity | None = None,
                  state: JobState | None = None) -> list[dict]:
        with self._lock:
            views = []
            for record in sorted(self.jobs.values(), key=lambda r: r.seq):
                if jobtag is not None and record.jobtag != jobtag:
                    continue
                if owner is not None and record.owner != owner:
                    continue
                if state is not None and record.state is not state:
                    continue
                views.append(record.status_view())
            return views

    # -- scheduler ---------------------------------------------------------

    def tick(self, now: int) -> list[tuple[str, str]]:
        with self._lock:
            if now < self.clock:
                raise ClockRegression(now, self.clock)
            changes = []
            for record in sorted(self.jobs.values(), key=lambda r: r.seq):
                if record.state is not JobState.ACTIVE or record.active_since is None:
                    continue
                total = record.active_time + (now - record.active_since)
                if total >= record.duration:
                    finish = record.active_since + (record.duration - record.active_time)
                    record.active_time = record.duration
                    record.active_since = None
                    self._transition(record, JobState.DONE, "done", "scheduler", finish)
                    record.ended_at = finish
                    changes.append((record.job_id, JobState.DONE.value))
            pending = sorted(
                (r for r in self.jobs.values() if r.state is JobState.PENDING),
                key=lambda r: (-r.priority, r.seq),
            )
            free = self.config.slots - self._active_count()
            for record in pending[: max(free, 0)]:
                self._transition(record, JobState.ACTIVE, "dispatched", "scheduler", now)
                record.started_at = now
                record.active_since = now
                changes.append((record.job_id, JobState.ACTIVE.value))
            self.clock = now
            return changes

    def snapshot(self) -> str:
        """Deterministic text dump of the whole job table."""
        with self._lock:
            lines = []
            for r in sorted(self.jobs.values(), key=lambda r: r.seq):
                lines.append(
                    f"{r.job_id} state={r.state.value} owner=\"{r.owner.render()}\" "
                    f"account={r.account} jobtag={r.jobtag or '-'} priority={r.priority} "
                    f"duration={r.duration} started={_fmt(r.started_at)} "
                    f"ended={_fmt(r.ended_at)} active_time={r.active_time}"
                )
                for h in r.history:
                    lines.append(f"  {h.time} {h.event} {h.actor}")
            return "\n".join(lines) + "\n"


def _fmt(value):
    return "-" if value is None else str(value)


def _satisfying_ref(result):
    if result.outcome is CalloutOutcome.SUCCESS and result.explanations:
        local_expl, vo_expl = result.explanations
        if local_expl.satisfying_grant and vo_expl.satisfying_grant:
            return f"{local_expl.satisfying_grant}+{vo_expl.satisfying_grant}"
    return None
