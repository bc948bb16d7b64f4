import random
from pathlib import Path

import pytest

from gridauthz.engine import AuthorizationRequest, JobContext
from gridauthz.policy import (
    GridIdentity,
    PolicyDocument,
    PolicyStatement,
    StatementKind,
    SubjectPattern,
    parse_policy,
)
from gridauthz.rsl import (
    Integer,
    NULL,
    Relation,
    RslAssertion,
    RslConjunction,
    SELF,
    Text,
    apply_defaults,
    parse_rsl,
    to_job_description,
)
from gridauthz.service import Service, ServiceConfig

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

# one [PASS]/[FAIL] line per acceptance criterion, printed after the run
_criterion_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    label = getattr(getattr(item, "function", None), "criterion_label", None)
    if label and report.when == "call":
        _criterion_results.append((label, report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_results:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed in _criterion_results:
        terminalreporter.write_line(("[PASS] " if passed else "[FAIL] ") + label)

BO_DN = "/O=Grid/O=Globus/OU=mcs.anl.gov/CN=Bo Liu"
KATE_DN = "/O=Grid/O=Globus/OU=mcs.anl.gov/CN=KateKeahey"
STRANGER_DN = "/O=Other/OU=elsewhere.org/CN=Stranger"


@pytest.fixture(scope="session")
def reference_policy_text():
    return (FIXTURES / "reference.policy").read_text()


@pytest.fixture(scope="session")
def ref_local(reference_policy_text):
    return parse_policy(reference_policy_text, "LOCAL", "reference")


@pytest.fixture(scope="session")
def ref_vo(reference_policy_text):
    return parse_policy(reference_policy_text, "VO", "reference")


@pytest.fixture(scope="session")
def bo():
    return GridIdentity.parse(BO_DN)


@pytest.fixture(scope="session")
def kate():
    return GridIdentity.parse(KATE_DN)


@pytest.fixture(scope="session")
def stranger():
    return GridIdentity.parse(STRANGER_DN)


def start_request(identity, rsl_text):
    description = apply_defaults(to_job_description(parse_rsl(rsl_text)))
    return AuthorizationRequest(identity, "start", description)


def management_request(identity, action, owner, jobtag, description=None,
                       signal_kind=None, job_id="job-1"):
    if description is None:
        description = apply_defaults(to_job_description(parse_rsl("&(executable=x)")))
    return AuthorizationRequest(
        identity, action, description,
        JobContext(job_id, owner, jobtag, signal_kind))


def write_service_tree(tmp_path, local_policy, vo_policy, gridmap=None,
                       callout="gram-authz rsl-pep\n", slots=2,
                       self_management="on"):
    """Materialize config + input files for a Service under tmp_path."""
    if gridmap is None:
        gridmap = (FIXTURES / "gridmap").read_text()
    (tmp_path / "local.policy").write_text(local_policy)
    (tmp_path / "vo.policy").write_text(vo_policy)
    (tmp_path / "gridmap").write_text(gridmap)
    (tmp_path / "callout.conf").write_text(callout)
    config = tmp_path / "service.conf"
    config.write_text(
        "local_policy_path = local.policy\n"
        "vo_policy_path = vo.policy\n"
        "gridmap_path = gridmap\n"
        "callout_config_path = callout.conf\n"
        "audit_log_path = audit.log\n"
        "event_log_path = events.log\n"
        f"slots = {slots}\n"
        f"self_management = {self_management}\n"
        "listen_endpoint = 127.0.0.1:0\n"
    )
    return config


def make_service(tmp_path, local_policy, vo_policy, **kwargs):
    config = write_service_tree(tmp_path, local_policy, vo_policy, **kwargs)
    return Service(ServiceConfig.from_file(config))


# ---------------------------------------------------------------------------
# random generators for round-trip and randomized-domain tests

ATTR_POOL = ("executable", "directory", "count", "jobtag", "queue",
             "maxtime", "action", "jobowner", "custom_attr")
TOKEN_POOL = ("test1", "test2", "TRANSP", "/sandbox/test", "short", "batch_q")
WEIRD_TEXT = ('with space', 'quo"te', 'paren(thesis)', 'back\\slash', '', '42')
DN_POOL = (BO_DN, KATE_DN, STRANGER_DN,
           "/O=Grid/O=Globus/OU=mcs.anl.gov",
           "/O=Grid/O=Globus")


def random_value(rng: random.Random, allow_special=True):
    roll = rng.random()
    if roll < 0.35:
        return Text(rng.choice(TOKEN_POOL))
    if roll < 0.5:
        return Text(rng.choice(WEIRD_TEXT))
    if roll < 0.8 or not allow_special:
        return Integer(rng.randint(-5, 20))
    return rng.choice((NULL, SELF))


def random_assertion(rng: random.Random):
    attribute = rng.choice(ATTR_POOL)
    relation = rng.choice(list(Relation))
    value = random_value(rng, allow_special=not relation.is_ordering)
    if relation.is_ordering:
        value = Integer(rng.randint(-5, 20))
    return RslAssertion(attribute, relation, value)


def random_conjunction(rng: random.Random, max_len=5):
    n = rng.randint(1, max_len)
    return RslConjunction(tuple(random_assertion(rng) for _ in range(n)))


def random_rule(rng: random.Random):
    """Conjunction legal as a policy rule: at most one action assertion."""
    while True:
        conj = random_conjunction(rng)
        if sum(1 for a in conj.assertions if a.attribute == "action") <= 1:
            return conj


def random_document(rng: random.Random, source="LOCAL"):
    statements = []
    line = 1
    for _ in range(rng.randint(0, 4)):
        subject = SubjectPattern(GridIdentity.parse(rng.choice(DN_POOL)))
        kind = rng.choice((StatementKind.REQUIREMENT, StatementKind.GRANT))
        for _ in range(rng.randint(1, 3)):
            line += 1
            statements.append(PolicyStatement(subject, kind, random_rule(rng), line))
        line += 1
    return PolicyDocument(tuple(statements), source, "random")


def random_start_request(rng: random.Random):
    identity = GridIdentity.parse(rng.choice(DN_POOL[:3]))
    parts = [f"(executable={rng.choice(('test1', 'test2', 'test3', 'TRANSP'))})",
             f"(count={rng.randint(1, 6)})"]
    if rng.random() < 0.7:
        parts.append(f"(directory={rng.choice(('/sandbox/test', '/tmp/other'))})")
    if rng.random() < 0.7:
        parts.append(f"(jobtag={rng.choice(('ADS', 'NFC', 'OTHER'))})")
    return start_request(identity, "&" + "".join(parts))


def random_request(rng: random.Random):
    if rng.random() < 0.6:
        return random_start_request(rng)
    identity = GridIdentity.parse(rng.choice(DN_POOL[:3]))
    owner = GridIdentity.parse(rng.choice(DN_POOL[:3]))
    action = rng.choice(("cancel", "information", "signal"))
    jobtag = rng.choice(("ADS", "NFC", None))
    kind = rng.choice(("suspend", "resume", "priority")) if action == "signal" else None
    return management_request(identity, action, owner, jobtag, signal_kind=kind)
