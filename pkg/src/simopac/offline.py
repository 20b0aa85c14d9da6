"""Run CLI commands in a child process that is denied all socket use."""

from __future__ import annotations

import os
import subprocess
import sys

_GUARD = """
import sys
def _deny(event, args):
    if event.startswith("socket."):
        raise PermissionError("network access denied: " + event)
sys.addaudithook(_deny)
from simopac.cli import main
sys.exit(main(sys.argv[1:]))
"""


def run_offline(argv: list[str], cwd=None, timeout: float = 30.0) -> subprocess.CompletedProcess:
    env = {k: v for k, v in os.environ.items() if not k.startswith("SIMOPAC_")}
    env["no_proxy"] = "*"
    return subprocess.run([sys.executable, "-c", _GUARD, *argv], cwd=cwd, env=env,
                          capture_output=True, text=True, timeout=timeout)
