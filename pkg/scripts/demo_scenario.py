#!/usr/bin/env python3
"""Run the bundled end-to-end scenario and print the protocol transcript.

The scenario submits a long-running tagged job, shows a management
request being denied, swaps in an extended policy at runtime, and then
drives the job table to completion.
"""

import sys
from pathlib import Path

from gridauthz.cli import main

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = ROOT / "fixtures"

if __name__ == "__main__":
    sys.exit(main([
        "simulate", str(FIXTURES / "scenarios" / "sc02.txt"),
        "--config", str(FIXTURES / "service.conf"),
    ]))
