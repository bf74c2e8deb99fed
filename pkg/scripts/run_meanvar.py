#!/usr/bin/env python3
"""Run the delayed-wealth experiment with the shipped default config."""

import os
import sys

from memsfde.cli import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

if __name__ == "__main__":
    config = os.path.join(ROOT, "configs", "meanvar.cfg")
    sys.exit(main(["meanvar", "--config", config, *sys.argv[1:]]))
