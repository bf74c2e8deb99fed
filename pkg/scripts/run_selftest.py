#!/usr/bin/env python3
"""Run the built-in analytic oracle suite."""

import sys

from memsfde.cli import main

if __name__ == "__main__":
    sys.exit(main(["selftest", *sys.argv[1:]]))
