#!/usr/bin/env python3
"""Processes 1-4 on the adversarial four-node star; writes event and engine logs.

Usage: python3 scripts/run_scenario_b.py [--out DIR] [options of `qdnet-harness scenario-b`]
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
    return main([*head, "scenario-b", *rest])


if __name__ == "__main__":
    raise SystemExit(run(sys.argv[1:]))
