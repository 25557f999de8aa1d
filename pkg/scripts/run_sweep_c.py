#!/usr/bin/env python3
"""Key-generation time and KBR against key size on the lossy star links; writes sweep_c.csv.

Usage: python3 scripts/run_sweep_c.py [--out DIR] [options of `qdnet-harness sweep-c`]
"""
import argparse
import sys

from qdnet.harness import main


def run(argv):
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--out", default="results")
    parser.add_argument("--state-dir")
    known, rest = parser.parse_known_args(argv)
    head = ["--out", known.out] + (["--state-dir", known.state_dir] if known.state_dir else [])
    return main([*head, "sweep-c", *rest])


if __name__ == "__main__":
    raise SystemExit(run(sys.argv[1:]))
