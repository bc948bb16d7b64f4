#!/usr/bin/env python3
"""Print the authorization decision matrix for the bundled policy.

Enumerates requesters, actions, executables, instance counts and job
tags, evaluates each request against fixtures/reference.policy used as both
the local and the virtual-organization document, and prints one line
per combination.  Useful for eyeballing policy changes.
"""

from pathlib import Path

from gridauthz.engine import authorize
from gridauthz.policy import GridIdentity, parse_policy
from gridauthz.rsl import apply_defaults, parse_rsl, to_job_description
from gridauthz.engine import AuthorizationRequest, JobContext

ROOT = Path(__file__).resolve().parent.parent
POLICY = (ROOT / "fixtures" / "reference.policy").read_text()

IDENTITIES = {
    "bo": GridIdentity.parse("/O=Grid/O=Globus/OU=mcs.anl.gov/CN=Bo Liu"),
    "kate": GridIdentity.parse("/O=Grid/O=Globus/OU=mcs.anl.gov/CN=KateKeahey"),
    "stranger": GridIdentity.parse("/O=Other/OU=elsewhere.org/CN=Stranger"),
}


def main():
    local = parse_policy(POLICY, "LOCAL")
    vo = parse_policy(POLICY, "VO")
    bo = IDENTITIES["bo"]
    for name, identity in IDENTITIES.items():
        for action in ("start", "cancel"):
            for executable in ("test1", "test2", "TRANSP"):
                for count in range(1, 6):
                    for jobtag in ("ADS", "NFC", None):
                        if action == "start":
                            parts = [f"(executable={executable})",
                                     "(directory=/sandbox/test)",
                                     f"(count={count})"]
                            if jobtag:
                                parts.append(f"(jobtag={jobtag})")
                            description = apply_defaults(
                                to_job_description(parse_rsl("&" + "".join(parts))))
                            req = AuthorizationRequest(identity, "start", description)
                        else:
                            description = apply_defaults(
                                to_job_description(parse_rsl("&(executable=x)")))
                            req = AuthorizationRequest(
                                identity, "cancel", description,
                                JobContext("job-1", bo, jobtag))
                        decision, _ = authorize(local, vo, req)
                        print(f"{name:9} {action:6} {executable:7} "
                              f"count={count} jobtag={jobtag or '-':4} "
                              f"-> {decision.outcome.value}")


if __name__ == "__main__":
    main()
