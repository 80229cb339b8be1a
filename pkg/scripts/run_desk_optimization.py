#!/usr/bin/env python3
"""Run the bundled desk optimization scenario end to end.

Executes the full loop on the 18-task desk dataset with the scripted
backends, persists the run under ./runs/desk, and prints the synthesized
protocol. Everything is deterministic; rerunning reproduces the same
artifacts byte for byte (modulo the created_at stamp).
"""

import sys
from pathlib import Path

from promptloop.cli import main
from promptloop.environment.desk import desk_data_dir


def run() -> int:
    config = desk_data_dir() / "config.json"
    code = main(["optimize", "--config", str(config), "--output-dir", "runs"])
    if code != 0:
        return code
    protocol = Path("runs/desk/iter_1/protocol.txt")
    if protocol.is_file():
        print("\nsynthesized protocol (iteration 1):\n")
        print(protocol.read_text())
    return 0


if __name__ == "__main__":
    sys.exit(run())
