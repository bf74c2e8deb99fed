#!/usr/bin/env python3
"""Run the distributed-delay energy experiment with the shipped default config.

Pass ``--det`` to use the hand-solvable deterministic sub-case instead.
"""

import os
import sys

from memsfde.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

if __name__ == "__main__":
    args = sys.argv[1:]
    name = "lq_det.cfg" if "--det" in args else "lq.cfg"
    args = [a for a in args if a != "--det"]
    config = os.path.join(ROOT, "configs", name)
    sys.exit(main(["lq", "--config", config, *args]))
